"""Relative-entropy rollout weights ``w_i = H_i / H_batch``.

Two batch means are supported:

* ``sequence_mean``: the plain mean of per-rollout mean entropies.
* ``token_weighted`` (default): total token entropy over total token count,
  under which ``(1/B) sum_i w_i |o_i|`` equals the mean rollout length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np

from prepo.rollout import Rollout

Mode = Literal["sequence_mean", "token_weighted"]
MODES = ("sequence_mean", "token_weighted")
ENTROPY_EPS = 1e-8
HIST_BINS = 50
HIST_RANGE = (0.0, 5.0)


class DegenerateEntropyError(ValueError):
    """Batch mean entropy is below ``ENTROPY_EPS``."""


@dataclass(frozen=True, eq=False)
class EntropyWeights:
    seq_entropies: np.ndarray
    batch_mean: float
    weights: np.ndarray
    mode: Mode = "token_weighted"
    degenerate: bool = False
    exact: tuple[Fraction, ...] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, n: int, mode: Mode = "token_weighted") -> "EntropyWeights":
        return cls(np.zeros(n), 0.0, np.ones(n), mode, degenerate=True)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown entropy mode {mode!r}")


def sequence_entropy(rollout: Rollout) -> float:
    if len(rollout) == 0:
        raise ValueError("empty rollout")
    return float(np.mean(rollout.token_entropies))


def _exact_sums(rollouts: Sequence[Rollout]) -> list[Fraction]:
    return [sum(map(Fraction, r.token_entropies.tolist()), Fraction(0)) for r in rollouts]


def _exact_batch_mean(sums: list[Fraction], lengths: list[int], mode: Mode) -> Fraction:
    if mode == "sequence_mean":
        return sum((s / n for s, n in zip(sums, lengths)), Fraction(0)) / len(sums)
    return sum(sums, Fraction(0)) / sum(lengths)


def batch_mean_entropy(rollouts: Sequence[Rollout], mode: Mode = "token_weighted") -> float:
    _check_mode(mode)
    if not rollouts:
        raise ValueError("empty rollout batch")
    value = float(_exact_batch_mean(_exact_sums(rollouts), [len(r) for r in rollouts], mode))
    if value < ENTROPY_EPS:
        raise DegenerateEntropyError(f"batch mean entropy {value:.3g} below {ENTROPY_EPS}")
    return value


def relative_weights(rollouts: Sequence[Rollout], mode: Mode = "token_weighted") -> EntropyWeights:
    """Weights for one micro-batch; a degenerate batch falls back to all ones.

    The ratios are formed in exact rational arithmetic over the float inputs
    and rounded once, so multiplying every token entropy by ``c`` leaves the
    weights bit-identical whenever the scaled entropies are themselves exact.
    """
    _check_mode(mode)
    if not rollouts:
        raise ValueError("empty rollout batch")
    sums = _exact_sums(rollouts)
    lengths = [len(r) for r in rollouts]
    seq = np.array([float(s / n) for s, n in zip(sums, lengths)])
    mean = _exact_batch_mean(sums, lengths, mode)
    if float(mean) < ENTROPY_EPS:
        return EntropyWeights(seq, float(mean), np.ones(len(rollouts)), mode, degenerate=True)
    exact = tuple(s / n / mean for s, n in zip(sums, lengths))
    return EntropyWeights(seq, float(mean), np.array([float(w) for w in exact]), mode, exact=exact)


def weight_sensitivity(rollouts: Sequence[Rollout], i: int, j: int, mode: Mode = "token_weighted") -> float:
    """Closed-form ``d w_i / d H_j`` where ``H_j`` is rollout j's mean entropy."""
    B = len(rollouts)
    if not (0 <= i < B and 0 <= j < B):
        raise IndexError(f"indices ({i}, {j}) out of range for batch of {B}")
    weights = relative_weights(rollouts, mode)
    if weights.degenerate:
        raise DegenerateEntropyError("sensitivity is undefined for a degenerate batch")
    mean = weights.batch_mean
    if mode == "token_weighted":
        share = len(rollouts[j]) / sum(len(r) for r in rollouts)
    else:
        share = 1.0 / B
    return ((1.0 if i == j else 0.0) - weights.weights[i] * share) / mean


def effective_batch_size(weights: EntropyWeights) -> float:
    """Mean relative weight, rounded once from the exact ratios when available."""
    if len(weights) == 0:
        raise ValueError("empty weights")
    if weights.exact is not None:
        return float(sum(weights.exact, Fraction(0)) / len(weights.exact))
    return float(np.mean(weights.weights))


def weight_histogram(weights: EntropyWeights) -> tuple[np.ndarray, int]:
    """Counts over 50 equal bins on [0, 5] plus the number of weights above 5."""
    w = np.asarray(weights.weights)
    counts, _ = np.histogram(w[w <= HIST_RANGE[1]], bins=HIST_BINS, range=HIST_RANGE)
    return counts, int(np.sum(w > HIST_RANGE[1]))
