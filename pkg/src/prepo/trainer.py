"""Online RLVR loop: score, select, roll out, weight, optimize, log.

Each step draws a candidate pool, scores it by prompt perplexity under the
current policy (before any rollout), selects ``K`` prompts, samples ``G``
rollouts per prompt from a frozen snapshot, verifies rewards, standardizes
advantages per group and takes one AdamW step per mini-batch of groups.

Random streams (all Philox, keyed by ``config.seed``):

* ``[seed, 0]``       policy initialization
* ``[seed, 0x9E37]``  candidate pool order
* ``[seed, 1, step]`` rollout uniforms
* ``[seed, 2, step]`` random-selection draws
* ``[seed, 3]``       evaluation sampling, separate from training
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from prepo import policy, scheduler, stats, weighting
from prepo.config import ExperimentSpec, TrainConfig
from prepo.objective import ClipConfig, Group, prepo_loss, prepo_loss_through_weights
from prepo.optim import AdamWState, adamw_step
from prepo.taskgen import Prompt, RewardSpec, TaskSpec, Vocab, dump_dataset, verify

EVAL_STREAM = 3


class TrainingDivergedError(RuntimeError):
    """A non-finite loss, gradient or parameter appeared mid-run."""


@dataclass
class StepMetrics:
    step: int
    rho: float
    window_start: int
    mean_reward: float
    policy_entropy: float
    zero_advantage_ratio: float
    all_correct_ratio: float
    effective_batch_size: float
    selected_ppl_min: float
    selected_ppl_mean: float
    selected_ppl_max: float
    rollout_count_cumulative: int
    clip_fraction: float
    grad_norm: float
    loss: float


@dataclass
class RunResult:
    params: policy.PolicyParams
    metrics: list[StepMetrics] = field(default_factory=list)
    run_dir: Path | None = None
    eval: dict | None = None


def layout_for(config: TrainConfig, vocab: Vocab) -> policy.PolicyLayout:
    return policy.PolicyLayout(vocab.size, vocab.pad_id, config.window, config.embed_dim, config.hidden_dim)


def initial_params(config: TrainConfig, vocab: Vocab) -> policy.PolicyParams:
    return policy.init_params(layout_for(config, vocab), seed=[config.seed, 0], scale=config.init_scale)


# --- evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    pass_at_1: float
    passrate: float
    per_prompt: np.ndarray  # fraction correct among k samples


def evaluate(
    params: policy.PolicyParams,
    eval_prompts: Sequence[Prompt],
    k: int,
    temperature: float,
    vocab: Vocab,
    seed: int = 0,
    max_len: int = 8,
    reward: RewardSpec = RewardSpec(),
) -> EvalResult:
    """pass@1 averaged over ``k`` samples, and the fraction of prompts solved at least once."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not eval_prompts:
        raise ValueError("empty evaluation set")
    reps = [p for p in eval_prompts for _ in range(k)]
    u = policy.rollout_rng([seed, EVAL_STREAM]).random((len(reps), max_len))
    rollouts = policy.sample_rollouts(params, reps, u, vocab.eos_id, temperature)
    correct = np.array([verify(p, r.tokens, reward, vocab) == reward.correct_reward for p, r in zip(reps, rollouts)])
    return correctness_summary(correct.reshape(len(eval_prompts), k))


def correctness_summary(correct: np.ndarray) -> EvalResult:
    """Summaries of a (prompts, k) boolean correctness matrix."""
    correct = np.asarray(correct, dtype=bool)
    frac = correct.mean(axis=1)
    return EvalResult(float(frac.mean()), float(correct.any(axis=1).mean()), frac)


@dataclass(frozen=True)
class Correlation:
    rho: float
    p_value: float
    approximate_p: bool = True


def ppl_passrate_correlation(
    params: policy.PolicyParams,
    prompts: Sequence[Prompt],
    k: int,
    vocab: Vocab,
    temperature: float = 1.0,
    seed: int = 0,
    max_len: int = 8,
) -> tuple[Correlation, np.ndarray, np.ndarray]:
    """Spearman correlation between prompt perplexity and per-prompt passrate@k.

    Returns the correlation and the two per-prompt columns it was computed on.
    """
    if len(prompts) < 3:
        raise ValueError("need at least 3 prompts")
    ppl = policy.prompt_ppls(params, prompts)
    res = evaluate(params, prompts, k, temperature, vocab, seed=seed, max_len=max_len)
    solved = (res.per_prompt > 0).astype(float)
    rho, p = stats.spearman(ppl, solved)
    return Correlation(rho, p), ppl, solved


# --- training ---------------------------------------------------------------


def select_prompts(config: TrainConfig, scored: scheduler.ScoredBatch, rho: float, step: int) -> tuple[list[int], int]:
    """Selected prompt ids and the window start (-1 when no window applies)."""
    K = config.sub_batch
    if config.selection in ("prepo", "ppl_schedule_only"):
        state = scheduler.SelectionState(rho, K, len(scored), config.pacing)
        start = scheduler.window_start(rho, len(scored), K, config.pacing)
        return scheduler.select_window(scored, state), start
    if config.selection == "random":
        return scheduler.static_group_select(scored, K, "random", seed=[config.seed, 2, step]), -1
    if config.selection == "low_ppl":
        return scheduler.static_group_select(scored, K, "lowest"), 0
    if config.selection == "high_ppl":
        return scheduler.static_group_select(scored, K, "highest"), len(scored) - K
    raise ValueError(f"unknown selection mode {config.selection!r}")


class _RunFiles:
    def __init__(self, run_dir: Path | None):
        self.run_dir = run_dir
        if run_dir is None:
            return
        run_dir.mkdir(parents=True, exist_ok=True)
        self.metrics = open(run_dir / "metrics.jsonl", "w")
        self.ppl = open(run_dir / "ppl_trace.csv", "w", newline="")
        self.ppl_csv = csv.writer(self.ppl)
        self.ppl_csv.writerow(["step", "rho", "l", "selected_ids", "min_ppl", "mean_ppl", "max_ppl"])
        self.hist = open(run_dir / "weights_hist.csv", "w", newline="")
        self.hist_csv = csv.writer(self.hist)
        self.hist_csv.writerow(
            ["step"] + [f"bin_{i:02d}" for i in range(weighting.HIST_BINS)] + ["overflow"]
        )

    def step(self, m: StepMetrics, selected: list[int], hist: np.ndarray, overflow: int):
        if self.run_dir is None:
            return
        self.metrics.write(json.dumps(asdict(m)) + "\n")
        self.ppl_csv.writerow(
            [
                m.step,
                repr(m.rho),
                m.window_start,
                " ".join(map(str, selected)),
                repr(m.selected_ppl_min),
                repr(m.selected_ppl_mean),
                repr(m.selected_ppl_max),
            ]
        )
        self.hist_csv.writerow([m.step] + [int(c) for c in hist] + [overflow])

    def close(self):
        if self.run_dir is None:
            return
        for f in (self.metrics, self.ppl, self.hist):
            f.close()


def _checkpoint(run_dir: Path | None, params: policy.PolicyParams, name: str):
    if run_dir is not None:
        policy.save_checkpoint(params, run_dir / f"{name}.bin")


def train(
    config: TrainConfig,
    dataset: Sequence[Prompt],
    task: TaskSpec,
    run_dir: str | Path | None = None,
    params: policy.PolicyParams | None = None,
) -> RunResult:
    config.validate()
    if len(dataset) < config.candidate_batch:
        raise ValueError(f"dataset has {len(dataset)} prompts, candidate_batch needs {config.candidate_batch}")
    vocab = task.vocab
    reward = RewardSpec(config.correct_reward, config.incorrect_reward)
    clip = ClipConfig(config.eps_low, config.eps_high)
    if params is None:
        params = initial_params(config, vocab)
    run_dir = Path(run_dir) if run_dir is not None else None
    files = _RunFiles(run_dir)
    _checkpoint(run_dir, params, "checkpoint_0")

    pool = scheduler.CandidatePool(len(dataset), config.seed)
    opt = AdamWState()
    K, G = config.sub_batch, config.group_size
    groups_per_mb = config.mini_batch // G
    result = RunResult(params, run_dir=run_dir)
    try:
        for step in range(config.total_steps):
            rho = scheduler.progress(step, config.total_steps)
            candidates = [dataset[i] for i in pool.draw(config.candidate_batch)]
            by_id = {p.id: p for p in candidates}
            scored = scheduler.score_batch(params, candidates)
            selected, start = select_prompts(config, scored, rho, step)

            snapshot = params.snapshot()
            reps = [by_id[i] for i in selected for _ in range(G)]
            u = policy.rollout_rng([config.seed, 1, step]).random((len(reps), config.max_rollout_len))
            rollouts = policy.sample_rollouts(snapshot, reps, u, vocab.eos_id, config.temperature)
            rollouts = [r.with_reward(verify(p, r.tokens, reward, vocab)) for p, r in zip(reps, rollouts)]
            groups = [
                Group.from_rollouts(pid, rollouts[k * G : (k + 1) * G]) for k, pid in enumerate(selected)
            ]

            losses, grad_norms, clip_fracs, eff_sizes, applied = [], [], [], [], []
            for _epoch in range(config.ppo_epochs):
                for b in range(0, len(groups), groups_per_mb):
                    mb = groups[b : b + groups_per_mb]
                    mb_rollouts = [r for g in mb for r in g.rollouts]
                    if config.weight_gradient:
                        report, w = prepo_loss_through_weights(params, mb, clip, config.entropy_mode)
                    else:
                        if config.use_weighting:
                            w = weighting.relative_weights(mb_rollouts, config.entropy_mode)
                        else:
                            w = weighting.EntropyWeights.uniform(len(mb_rollouts), config.entropy_mode)
                        report = prepo_loss(params, mb, w, clip)
                    if not np.all(np.isfinite(report.gradient)):
                        raise FloatingPointError("non-finite gradient")
                    vec, opt = adamw_step(
                        params.vector,
                        -report.gradient,
                        opt,
                        config.learning_rate,
                        config.beta1,
                        config.beta2,
                        config.weight_decay,
                        config.adam_eps,
                    )
                    if not np.all(np.isfinite(vec)):
                        raise FloatingPointError("non-finite parameters after update")
                    params = params.replace(vec)
                    losses.append(report.loss)
                    grad_norms.append(float(np.linalg.norm(report.gradient)))
                    clip_fracs.append(report.clip_fraction)
                    eff_sizes.append(weighting.effective_batch_size(w))
                    applied.append(w.weights)

            sel_ppl = np.array([scored.score_of()[i] for i in selected])
            rewards = np.array([r.reward for r in rollouts])
            all_correct = [all(r.reward == reward.correct_reward for r in g.rollouts) for g in groups]
            all_ent = np.concatenate([r.token_entropies for r in rollouts])
            hist, overflow = weighting.weight_histogram(
                weighting.EntropyWeights(np.zeros(0), 0.0, np.concatenate(applied))
            )
            m = StepMetrics(
                step=step,
                rho=rho,
                window_start=start,
                mean_reward=float(rewards.mean()),
                policy_entropy=float(all_ent.mean()),
                zero_advantage_ratio=float(np.mean([g.zero_advantage for g in groups])),
                all_correct_ratio=float(np.mean(all_correct)),
                effective_batch_size=float(np.mean(eff_sizes)),
                selected_ppl_min=float(sel_ppl.min()),
                selected_ppl_mean=float(sel_ppl.mean()),
                selected_ppl_max=float(sel_ppl.max()),
                rollout_count_cumulative=(step + 1) * K * G,
                clip_fraction=float(np.mean(clip_fracs)),
                grad_norm=float(np.mean(grad_norms)),
                loss=float(np.mean(losses)),
            )
            result.metrics.append(m)
            files.step(m, selected, hist, overflow)
            result.params = params
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                _checkpoint(run_dir, params, f"checkpoint_{step + 1}")
    except FloatingPointError as exc:
        _checkpoint(run_dir, params, "checkpoint_last_good")
        if run_dir is not None:
            (run_dir / "nan_dump.json").write_text(
                json.dumps({"step": len(result.metrics), "error": str(exc)}, indent=2) + "\n"
            )
        raise TrainingDivergedError(f"training diverged at step {len(result.metrics)}: {exc}") from exc
    finally:
        files.close()

    result.params = params
    if config.total_steps and not (config.checkpoint_every and config.total_steps % config.checkpoint_every == 0):
        _checkpoint(run_dir, params, f"checkpoint_{config.total_steps}")
    return result


def run_experiment(spec: ExperimentSpec, out_root: str | Path | None = None) -> RunResult:
    """Generate data, train, evaluate, and write the full run directory."""
    from prepo.config import dump_spec
    from prepo.taskgen import generate_dataset

    spec.validate()
    root = Path(out_root if out_root is not None else spec.out)
    run_dir = root / spec.name
    run_dir.mkdir(parents=True, exist_ok=False)
    dump_spec(spec, run_dir / "config_echo.json")
    task = TaskSpec(spec.dataset.modulus)
    n_total = spec.dataset.n_prompts + spec.eval.n_prompts
    prompts = generate_dataset(spec.dataset.seed, n_total, (spec.dataset.level_min, spec.dataset.level_max), task)
    train_set, eval_set = prompts[: spec.dataset.n_prompts], prompts[spec.dataset.n_prompts :]
    dump_dataset(train_set, run_dir / "dataset.txt")
    if eval_set:
        dump_dataset(eval_set, run_dir / "eval_dataset.txt")
    (run_dir / "run_meta.json").write_text(
        json.dumps(
            {
                "entropy_unit": "nats",
                "rng": "numpy Philox4x64 via SeedSequence",
                "eval_stream": [spec.train.seed, EVAL_STREAM],
                "objective_sign": "maximized; optimizer receives the negated gradient",
            },
            indent=2,
        )
        + "\n"
    )
    result = train(spec.train, train_set, task, run_dir)
    if eval_set:
        ev = evaluate(
            result.params,
            eval_set,
            spec.eval.k,
            spec.eval.temperature,
            task.vocab,
            seed=spec.train.seed,
            max_len=spec.train.max_rollout_len,
        )
        result.eval = {
            "k": spec.eval.k,
            "n_prompts": len(eval_set),
            "pass_at_1_avg_k": ev.pass_at_1,
            "passrate_at_k": ev.passrate,
        }
    else:
        result.eval = {}
    (run_dir / "eval.json").write_text(json.dumps(result.eval, indent=2) + "\n")
    return result
