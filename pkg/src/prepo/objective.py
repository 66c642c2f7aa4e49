"""Group-standardized advantages and the clipped, entropy-weighted surrogate.

Sign convention: ``LossReport.loss`` is the surrogate *objective* and
``LossReport.gradient`` its gradient; both are to be maximized. The trainer
hands ``-gradient`` to the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from prepo import policy
from prepo.rollout import Rollout
from prepo.weighting import EntropyWeights, Mode, relative_weights

STD_EPS = 1e-8


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self):
        if not 0.0 < self.eps_low < 1.0:
            raise ValueError(f"eps_low must lie in (0, 1), got {self.eps_low}")
        if self.eps_high < self.eps_low:
            raise ValueError("eps_high must be >= eps_low")


def group_advantage(rewards: Sequence[float]) -> tuple[np.ndarray, bool]:
    """``(r - mean) / std`` with the population std; all zeros when std < 1e-8."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group advantage needs at least two rollouts")
    std = r.std()
    if std < STD_EPS:
        return np.zeros_like(r), True
    return (r - r.mean()) / std, False


@dataclass(frozen=True, eq=False)
class Group:
    prompt_id: int
    rollouts: tuple[Rollout, ...]
    advantages: np.ndarray
    zero_advantage: bool

    @classmethod
    def from_rollouts(cls, prompt_id: int, rollouts: Sequence[Rollout]) -> "Group":
        if any(r.prompt_id != prompt_id for r in rollouts):
            raise ValueError("every rollout in a group must share the prompt id")
        adv, zero = group_advantage([r.reward for r in rollouts])
        return cls(prompt_id, tuple(rollouts), adv, zero)

    def __len__(self) -> int:
        return len(self.rollouts)


@dataclass(frozen=True, eq=False)
class LossReport:
    loss: float
    gradient: np.ndarray
    zero_advantage: tuple[bool, ...]
    clip_fraction: float
    clipped_mask: np.ndarray  # per token, in group/rollout/token order


def importance_ratio(params: policy.PolicyParams, rollout: Rollout, t: int) -> float:
    if not 0 <= t < len(rollout):
        raise IndexError(f"token index {t} out of range for rollout of length {len(rollout)}")
    window = policy.context_window(params.layout, rollout.prompt_tokens + rollout.tokens[:t])
    lp = policy.token_log_probs(params, window[None, :], np.array([rollout.tokens[t]]))[0]
    return float(np.exp(lp - rollout.old_log_probs[t]))


def clip_ratio(s, clip: ClipConfig):
    return np.clip(s, 1.0 - clip.eps_low, 1.0 + clip.eps_high)


def clipped_term(s: float, adv: float, clip: ClipConfig) -> float:
    return float(min(s * adv, clip_ratio(s, clip) * adv))


def _flatten(layout: policy.PolicyLayout, groups: Sequence[Group]):
    """Token-level arrays; ``base`` is each token's ``1/(n_groups G |o_i|)`` factor."""
    n_groups = len(groups)
    windows, targets, old_lp, adv, base, owner = [], [], [], [], [], []
    k = 0
    for g in groups:
        G = len(g)
        for i, r in enumerate(g.rollouts):
            n = len(r)
            windows.append(policy.rollout_windows(layout, r))
            targets.extend(r.tokens)
            old_lp.append(r.old_log_probs)
            adv.append(np.full(n, g.advantages[i]))
            base.append(np.full(n, 1.0 / (n_groups * G * n)))
            owner.append(np.full(n, k))
            k += 1
    return (
        np.concatenate(windows),
        np.array(targets, dtype=np.int64),
        np.concatenate(old_lp),
        np.concatenate(adv),
        np.concatenate(base),
        np.concatenate(owner),
    )


def _weights_array(groups: Sequence[Group], weights) -> np.ndarray:
    if not groups:
        raise ValueError("no groups")
    w = np.asarray(weights.weights if isinstance(weights, EntropyWeights) else weights, dtype=np.float64)
    n_rollouts = sum(len(g) for g in groups)
    if w.shape != (n_rollouts,):
        raise ValueError(f"{w.size} weights for {n_rollouts} rollouts")
    return w


def _surrogate(params, groups, w, clip, branch_mask):
    windows, targets, old_lp, adv, base, owner = _flatten(params.layout, groups)
    coef = base * w[owner]
    cur_lp = policy.token_log_probs(params, windows, targets)
    s = np.exp(cur_lp - old_lp)
    unclipped = s * adv
    clipped = clip_ratio(s, clip) * adv
    if branch_mask is None:
        on_clip = clipped < unclipped
    else:
        on_clip = np.asarray(branch_mask, dtype=bool)
        if on_clip.shape != s.shape:
            raise ValueError("branch_mask must have one entry per token")
    term = np.where(on_clip, clipped, unclipped)
    loss = float(np.sum(coef * term))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite surrogate objective")
    grad = policy.weighted_score(params, windows, targets, np.where(on_clip, 0.0, coef * unclipped))
    return loss, grad, on_clip, term, windows, base, owner


def prepo_loss(
    params: policy.PolicyParams,
    groups: Sequence[Group],
    weights: EntropyWeights | np.ndarray,
    clip: ClipConfig,
    branch_mask: np.ndarray | None = None,
) -> LossReport:
    """Mean over groups of ``(1/G) sum_i w_i (1/|o_i|) sum_t min(s A, clip(s) A)``.

    Weights are constants here. Tokens on the clipped branch contribute no
    gradient. ``branch_mask`` pins which tokens count as clipped (used for
    finite-difference checks).
    """
    w = _weights_array(groups, weights)
    loss, grad, on_clip, *_ = _surrogate(params, groups, w, clip, branch_mask)
    return LossReport(
        loss,
        grad,
        tuple(g.zero_advantage for g in groups),
        float(on_clip.mean()),
        on_clip,
    )


def grpo_loss(
    params: policy.PolicyParams,
    groups: Sequence[Group],
    clip: ClipConfig,
    branch_mask: np.ndarray | None = None,
) -> LossReport:
    """The same surrogate with every rollout weight fixed to 1."""
    n = sum(len(g) for g in groups)
    return prepo_loss(params, groups, np.ones(n), clip, branch_mask)


def prepo_loss_through_weights(
    params: policy.PolicyParams,
    groups: Sequence[Group],
    clip: ClipConfig,
    mode: Mode = "token_weighted",
    branch_mask: np.ndarray | None = None,
) -> tuple[LossReport, EntropyWeights]:
    """Variant where the relative weights are functions of the current policy.

    Token entropies are recomputed under ``params`` and the gradient includes
    the path through ``w_i``. At the sampling snapshot the loss value equals
    :func:`prepo_loss` with the recorded entropies. A degenerate batch falls
    back to unit weights and contributes no weight gradient.
    """
    rollouts = [r for g in groups for r in g.rollouts]
    windows_per = [policy.rollout_windows(params.layout, r) for r in rollouts]
    if not rollouts:
        raise ValueError("no groups")
    ent = policy.entropies(policy.forward_batch(params, np.concatenate(windows_per)))
    bounds = np.cumsum([0] + [len(r) for r in rollouts])
    current = [r.with_entropies(ent[bounds[k] : bounds[k + 1]]) for k, r in enumerate(rollouts)]
    w = relative_weights(current, mode)
    loss, grad, on_clip, term, windows, base, owner = _surrogate(params, groups, w.weights, clip, branch_mask)
    if not w.degenerate:
        lengths = np.diff(bounds)
        # a_i: the surrogate share multiplying w_i
        a = np.bincount(owner, weights=base * term, minlength=len(rollouts))
        share = lengths / lengths.sum() if mode == "token_weighted" else np.full(len(rollouts), 1.0 / len(rollouts))
        c = (a - np.dot(a, w.weights) * share) / w.batch_mean
        grad = grad + policy.weighted_entropy_grad(params, windows, (c / lengths)[owner])
    report = LossReport(loss, grad, tuple(g.zero_advantage for g in groups), float(on_clip.mean()), on_clip)
    return report, w
