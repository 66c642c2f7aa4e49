"""Command-line front end.

Exit codes: 0 ok, 2 parse error, 3 validation error, 4 training diverged,
5 missing input.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from prepo import policy, trainer
from prepo.config import ConfigError, load_spec
from prepo.stats import UndefinedCorrelationError
from prepo.taskgen import TaskSpec, load_dataset

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_NAN = 4
EXIT_MISSING = 5

MISSING = "NA"
NOT_REACHED = "not_reached"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"prepo: error: {msg}", file=sys.stderr)


# --- compare ------------------------------------------------------------------


@dataclass
class Comparison:
    runs: list[str]
    rollouts: list[int]
    columns: dict[str, list[float | None]]  # run -> value per rollout row (None = missing)
    reached: dict[str, int | None]  # run -> first rollout count at threshold

    def rows(self) -> list[list[str]]:
        out = []
        for k, count in enumerate(self.rollouts):
            row = [str(count)]
            for run in self.runs:
                v = self.columns[run][k]
                row.append(MISSING if v is None else repr(v))
            out.append(row)
        return out


def read_metrics(run_dir: Path) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.is_file():
        raise CliError(EXIT_MISSING, f"no metrics.jsonl in {run_dir}")
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from None


def smooth(values: Sequence[float], window: int) -> list[float]:
    """Trailing moving average; the first rows average what is available."""
    if window <= 1:
        return list(values)
    csum = np.cumsum(np.concatenate([[0.0], np.asarray(values, dtype=np.float64)]))
    out = []
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out.append(float((csum[i + 1] - csum[lo]) / (i + 1 - lo)))
    return out


def compare_runs(
    run_dirs: Sequence[str | Path],
    metric: str = "mean_reward",
    threshold: float | None = None,
    window: int = 1,
) -> Comparison:
    """Align ``metric`` across runs on cumulative rollout count."""
    if len(run_dirs) < 2:
        raise CliError(EXIT_VALIDATION, "compare needs at least two runs")
    names: list[str] = []
    series: dict[str, dict[int, float]] = {}
    for d in run_dirs:
        base = Path(d).name or str(d)
        name = base
        k = 2
        while name in series:
            name = f"{base}#{k}"
            k += 1
        metrics = read_metrics(Path(d))
        if metrics and metric not in metrics[0]:
            raise CliError(EXIT_VALIDATION, f"unknown metric {metric!r}")
        counts = [int(m["rollout_count_cumulative"]) for m in metrics]
        values = smooth([float(m[metric]) for m in metrics], window)
        names.append(name)
        series[name] = dict(zip(counts, values))
    rollouts = sorted({c for s in series.values() for c in s})
    columns = {n: [series[n].get(c) for c in rollouts] for n in names}
    reached: dict[str, int | None] = {}
    for n in names:
        reached[n] = None
        if threshold is not None:
            for c in sorted(series[n]):
                if series[n][c] >= threshold:
                    reached[n] = c
                    break
    return Comparison(names, rollouts, columns, reached)


def write_comparison(cmp: Comparison, path: Path | None, metric: str) -> None:
    header = ["rollouts"] + [f"{r}:{metric}" for r in cmp.runs]
    f = open(path, "w", newline="") if path is not None else sys.stdout
    try:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(cmp.rows())
    finally:
        if path is not None:
            f.close()


# --- analyze-ppl ------------------------------------------------------------------


def _load_inputs(checkpoint: str, dataset: str, modulus: int):
    for p in (checkpoint, dataset):
        if not Path(p).is_file():
            raise CliError(EXIT_MISSING, f"no such file: {p}")
    try:
        params = policy.load_checkpoint(checkpoint)
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"{checkpoint}: {exc}") from None
    try:
        prompts = load_dataset(dataset)
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"{dataset}: {exc}") from None
    task = TaskSpec(modulus)
    vocab = task.vocab
    if params.layout.vocab_size != vocab.size or params.layout.pad_id != vocab.pad_id:
        raise CliError(
            EXIT_VALIDATION,
            f"checkpoint vocabulary ({params.layout.vocab_size} tokens) does not match modulus {modulus} "
            f"({vocab.size} tokens)",
        )
    too_big = [p.id for p in prompts if max(p.tokens + p.answer) >= vocab.size]
    if too_big:
        raise CliError(EXIT_VALIDATION, f"dataset uses tokens outside the vocabulary (prompt {too_big[0]})")
    if not prompts:
        raise CliError(EXIT_VALIDATION, "dataset is empty")
    return params, prompts, vocab


def bucket_table(ppl: np.ndarray, passrate: np.ndarray, n_buckets: int) -> list[dict]:
    """Equal-count PPL buckets (ascending) with their mean passrate."""
    order = np.argsort(ppl, kind="stable")
    out = []
    for b, idx in enumerate(np.array_split(order, min(n_buckets, len(ppl)))):
        out.append(
            {
                "bucket": b,
                "n": int(idx.size),
                "ppl_min": float(ppl[idx].min()),
                "ppl_max": float(ppl[idx].max()),
                "ppl_mean": float(ppl[idx].mean()),
                "passrate_mean": float(passrate[idx].mean()),
            }
        )
    return out


def analyze_ppl(params, prompts, vocab, k: int, temperature: float, seed: int, max_len: int, out_dir: Path) -> dict:
    """Write the per-prompt table, PPL buckets and Spearman summary; return the summary."""
    ppl = policy.prompt_ppls(params, prompts)
    ev = trainer.evaluate(params, prompts, k, temperature, vocab, seed=seed, max_len=max_len)
    solved = (ev.per_prompt > 0).astype(float)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ppl_passrate.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["prompt_id", "difficulty", "ppl", f"passrate_at_{k}", f"pass_at_1_avg_{k}"])
        for p, x, s, frac in zip(prompts, ppl, solved, ev.per_prompt):
            w.writerow([p.id, p.difficulty_tag, repr(float(x)), int(s), repr(float(frac))])
    buckets = bucket_table(ppl, solved, 5)
    with open(out_dir / "ppl_buckets.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(buckets[0]))
        w.writeheader()
        w.writerows(buckets)
    summary = {"n_prompts": len(prompts), "k": k, "spearman_rho": None, "p_value": None}
    try:
        corr, _, _ = trainer.ppl_passrate_correlation(
            params, prompts, k, vocab, temperature=temperature, seed=seed, max_len=max_len
        )
        summary.update(
            spearman_rho=corr.rho,
            p_value=corr.p_value,
            p_value_approximate=corr.approximate_p,
            p_value_method="t approximation, n-2 degrees of freedom",
        )
    except (UndefinedCorrelationError, ValueError) as exc:
        summary["undefined_reason"] = str(exc)
    (out_dir / "spearman.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# --- commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    path = Path(args.spec)
    if not path.is_file():
        raise CliError(EXIT_MISSING, f"no such spec file: {path}")
    try:
        spec = load_spec(path)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from None
    except ConfigError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    if args.seed is not None:
        spec.train.seed = args.seed
    if args.sequential:
        spec.train.sequential = True
    out_root = Path(args.out) if args.out is not None else Path(spec.out)
    if (out_root / spec.name).exists():
        raise CliError(EXIT_VALIDATION, f"run name {spec.name!r} already exists under {out_root}")
    try:
        result = trainer.run_experiment(spec, out_root)
    except trainer.TrainingDivergedError as exc:
        raise CliError(EXIT_NAN, str(exc)) from None
    except ConfigError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    last = result.metrics[-1] if result.metrics else None
    print(
        json.dumps(
            {
                "run_dir": str(result.run_dir),
                "steps": len(result.metrics),
                "rollouts": last.rollout_count_cumulative if last else 0,
                "final_mean_reward": last.mean_reward if last else None,
                "eval": result.eval,
            }
        )
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    params, prompts, vocab = _load_inputs(args.checkpoint, args.dataset, args.modulus)
    seed = args.seed if args.seed is not None else 0
    ev = trainer.evaluate(params, prompts, args.k, args.temperature, vocab, seed=seed, max_len=args.max_len)
    report = {"k": args.k, "n_prompts": len(prompts), "pass_at_1_avg_k": ev.pass_at_1, "passrate_at_k": ev.passrate}
    text = json.dumps(report, indent=2) + "\n"
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    cmp = compare_runs(args.runs, args.metric, args.threshold, args.smooth)
    path = None
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        path = Path(args.out) / f"compare_{args.metric}.csv"
    write_comparison(cmp, path, args.metric)
    if args.threshold is not None:
        for run in cmp.runs:
            r = cmp.reached[run]
            print(f"{run}: rollouts to {args.metric} >= {args.threshold}: {NOT_REACHED if r is None else r}",
                  file=sys.stderr if path is None else sys.stdout)
    return EXIT_OK


def cmd_analyze_ppl(args) -> int:
    params, prompts, vocab = _load_inputs(args.checkpoint, args.dataset, args.modulus)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out) if args.out is not None else Path("analysis")
    summary = analyze_ppl(params, prompts, vocab, args.k, args.temperature, seed, args.max_len, out)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_golden(args) -> int:
    from prepo.golden import write_golden

    path = Path(args.path)
    if path.exists() and not args.force:
        raise CliError(EXIT_VALIDATION, f"{path} exists; pass --force to overwrite")
    write_golden(path)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def global_flags(defaults: bool) -> argparse.ArgumentParser:
        # subcommands accept the same flags; SUPPRESS keeps them from
        # clobbering a value given before the subcommand name
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=d(None), help="override the run / sampling seed")
        g.add_argument("--sequential", action="store_true", default=d(False), help="deterministic sequential execution")
        g.add_argument("--out", default=d(None), help="output directory")
        return g

    common = global_flags(False)
    parser = argparse.ArgumentParser(
        prog="prepo",
        description="Perplexity-scheduled prompt selection with entropy-weighted rollouts.",
        epilog="exit codes: 0 ok, 2 parse, 3 validation, 4 training diverged, 5 missing input",
        parents=[global_flags(True)],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run an experiment from a JSON spec")
    p.add_argument("spec")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("eval", cmd_eval, "pass@1 (avg k) and passrate@k of a checkpoint"),
        ("analyze-ppl", cmd_analyze_ppl, "per-prompt perplexity vs passrate, with Spearman summary"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--k", type=int, default=16)
        p.add_argument("--temperature", type=float, default=1.0)
        p.add_argument("--max-len", type=int, default=8)
        p.add_argument("--modulus", type=int, default=5)
        p.set_defaults(func=func)

    p = sub.add_parser("compare", parents=[common], help="align a metric across runs by rollout count")
    p.add_argument("runs", nargs="+")
    p.add_argument("--metric", default="mean_reward")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--smooth", type=int, default=1, help="trailing moving-average window")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("golden", parents=[common], help="regenerate golden rollout fixtures")
    p.add_argument("--path", default="tests/golden/rollouts.json")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_golden)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    for name in ("k", "max_len", "smooth"):
        if getattr(args, name, 1) < 1:
            _err(f"--{name.replace('_', '-')} must be >= 1")
            return EXIT_VALIDATION
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
