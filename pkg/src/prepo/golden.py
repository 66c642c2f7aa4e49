"""Golden rollout fixtures recorded from the Philox-based sampler."""

from __future__ import annotations

import json
from pathlib import Path

from prepo import policy
from prepo.taskgen import TaskSpec, generate_dataset

GOLDEN_CASES = [
    # (param init seed, prompt index, rollout seed)
    (0, 0, 1234),
    (0, 3, 99),
    (7, 1, 2024),
]


def golden_layout() -> policy.PolicyLayout:
    vocab = TaskSpec(5).vocab
    return policy.PolicyLayout(vocab.size, vocab.pad_id)


def golden_rollouts() -> list[dict]:
    task = TaskSpec(5)
    prompts = generate_dataset(7, 4, (2, 3), task)
    out = []
    for init_seed, idx, rseed in GOLDEN_CASES:
        params = policy.init_params(golden_layout(), seed=init_seed, scale=0.3)
        r = policy.sample_rollout(params.snapshot(), prompts[idx], 1.0, 8, rseed, task.vocab.eos_id)
        out.append(
            {
                "init_seed": init_seed,
                "prompt_tokens": list(prompts[idx].tokens),
                "rollout_seed": rseed,
                "tokens": list(r.tokens),
                "old_log_probs": [float(x) for x in r.old_log_probs],
                "token_entropies": [float(x) for x in r.token_entropies],
            }
        )
    return out


def write_golden(path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"rollouts": golden_rollouts()}, f, indent=2)
        f.write("\n")
