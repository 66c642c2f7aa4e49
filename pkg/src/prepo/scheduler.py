"""Perplexity-scheduled online batch selection.

Candidates are scored by teacher-forced prompt perplexity under the current
policy, sorted ascending (ties broken by prompt id), and a contiguous
window of ``K`` positions is taken starting at ``l(rho) = floor(g(rho) * (|B| - K))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from prepo import policy

Pacing = Literal["linear", "quadratic", "exponential"]
PACINGS = ("linear", "quadratic", "exponential")


def pace(rho: float, pacing: Pacing = "linear") -> float:
    if pacing == "linear":
        return rho
    if pacing == "quadratic":
        return rho * rho
    if pacing == "exponential":
        return math.expm1(rho) / math.expm1(1.0)
    raise ValueError(f"unknown pacing {pacing!r}")


def progress(step: int, total_steps: int) -> float:
    """Normalized training progress ``step / (total_steps - 1)``, clamped to [0, 1]."""
    if total_steps <= 1:
        return 0.0
    return min(1.0, max(0.0, step / (total_steps - 1)))


@dataclass(frozen=True)
class SelectionState:
    rho: float
    K: int
    candidate_size: int
    pacing: Pacing = "linear"

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 1 <= self.K <= self.candidate_size:
            raise ValueError(f"need 1 <= K <= candidate_size, got K={self.K}, |B|={self.candidate_size}")
        if self.pacing not in PACINGS:
            raise ValueError(f"unknown pacing {self.pacing!r}")


@dataclass(frozen=True)
class ScoredBatch:
    ids: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.scores):
            raise ValueError("ids and scores differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("prompt ids must be unique")
        if any(not s >= 1.0 - 1e-12 for s in self.scores):
            raise ValueError("perplexity scores must be >= 1")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, float]]) -> "ScoredBatch":
        return cls(tuple(int(i) for i, _ in pairs), tuple(float(s) for _, s in pairs))

    def __len__(self) -> int:
        return len(self.ids)

    def sorted_ids(self) -> list[int]:
        """Ascending perplexity; equal scores ordered by ascending id."""
        return [i for _, i in sorted(zip(self.scores, self.ids))]

    def score_of(self) -> dict[int, float]:
        return dict(zip(self.ids, self.scores))


def window_start(rho: float, batch_size: int, K: int, pacing: Pacing = "linear") -> int:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if not 1 <= K <= batch_size:
        raise ValueError(f"need 1 <= K <= batch_size, got K={K}, batch_size={batch_size}")
    span = batch_size - K
    return min(span, max(0, math.floor(pace(rho, pacing) * span)))


def select_window(scored: ScoredBatch, state: SelectionState) -> list[int]:
    if len(scored) != state.candidate_size:
        raise ValueError(
            f"scored batch has {len(scored)} entries, selection state expects {state.candidate_size}"
        )
    start = window_start(state.rho, state.candidate_size, state.K, state.pacing)
    return scored.sorted_ids()[start : start + state.K]


def score_batch(params: policy.PolicyParams, prompts: Sequence) -> ScoredBatch:
    if not prompts:
        raise ValueError("cannot score an empty prompt list")
    ppl = policy.prompt_ppls(params, prompts)
    return ScoredBatch(tuple(p.id for p in prompts), tuple(float(v) for v in ppl))


def static_group_select(scored: ScoredBatch, K: int, mode: str = "lowest", seed: int | None = None) -> list[int]:
    """Fixed low/high-perplexity groups, or a seeded uniform draw without replacement."""
    if not 1 <= K <= len(scored):
        raise ValueError(f"K={K} exceeds candidate size {len(scored)}")
    if mode == "lowest":
        return scored.sorted_ids()[:K]
    if mode == "highest":
        return scored.sorted_ids()[len(scored) - K :]
    if mode == "random":
        if seed is None:
            raise ValueError("random selection needs a seed")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        picks = rng.permutation(len(scored))[:K]
        return [scored.ids[i] for i in picks]
    raise ValueError(f"unknown selection mode {mode!r}")


class CandidatePool:
    """Round-robin candidate draws, without replacement within an epoch.

    Each epoch visits a fresh seeded permutation of the dataset. When an
    epoch runs out mid-draw, the pool is topped up from the next epoch and
    ids already in the pool are deferred to later in that epoch.
    """

    def __init__(self, n_items: int, seed: int):
        self.n_items = n_items
        self._rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x9E37])))
        self._queue: list[int] = []
        self.epoch = 0

    def _refill(self):
        self._queue.extend(int(i) for i in self._rng.permutation(self.n_items))
        self.epoch += 1

    def draw(self, size: int) -> list[int]:
        if size > self.n_items:
            raise ValueError(f"pool size {size} exceeds dataset size {self.n_items}")
        picked: list[int] = []
        taken: set[int] = set()
        while len(picked) < size:
            if not self._queue:
                self._refill()
            deferred = []
            while self._queue and len(picked) < size:
                i = self._queue.pop(0)
                if i in taken:
                    deferred.append(i)
                else:
                    picked.append(i)
                    taken.add(i)
            self._queue[0:0] = deferred
            if len(picked) < size and all(i in taken for i in self._queue):
                self._refill()
        return picked
