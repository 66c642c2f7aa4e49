from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Rollout:
    """One sampled completion with per-token statistics recorded at sampling time.

    ``old_log_probs`` and ``token_entropies`` come from the snapshot policy
    and are never recomputed afterwards.
    """

    prompt_id: int
    prompt_tokens: tuple[int, ...]
    tokens: tuple[int, ...]
    old_log_probs: np.ndarray
    token_entropies: np.ndarray
    reward: float = 0.0

    def __post_init__(self):
        n = len(self.tokens)
        if n < 1:
            raise ValueError("rollout must contain at least one token")
        lp = np.asarray(self.old_log_probs, dtype=np.float64)
        ent = np.asarray(self.token_entropies, dtype=np.float64)
        if lp.shape != (n,) or ent.shape != (n,):
            raise ValueError("tokens, old_log_probs and token_entropies must have equal length")
        if np.any(ent < 0):
            raise ValueError("token entropies must be non-negative")
        object.__setattr__(self, "old_log_probs", lp)
        object.__setattr__(self, "token_entropies", ent)

    def __len__(self) -> int:
        return len(self.tokens)

    def with_reward(self, reward: float) -> "Rollout":
        return Rollout(
            self.prompt_id,
            self.prompt_tokens,
            self.tokens,
            self.old_log_probs,
            self.token_entropies,
            float(reward),
        )

    def with_entropies(self, entropies) -> "Rollout":
        return Rollout(
            self.prompt_id,
            self.prompt_tokens,
            self.tokens,
            self.old_log_probs,
            np.asarray(entropies, dtype=np.float64),
            self.reward,
        )
