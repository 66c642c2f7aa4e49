"""Tiny autoregressive categorical policy with hand-derived gradients.

Architecture: the last ``window`` tokens of the context (left-filled with
the padding id) are embedded with a separate table per window slot, the
slot embeddings are mean-pooled, passed through one tanh hidden layer and
projected to vocabulary logits::

    h = (1/W) * sum_s E[s, ctx_s]
    z = tanh(h @ W1 + b1)
    logits = z @ W2 + b2

All parameters live in one flat float64 vector; ``PolicyLayout`` records
the slicing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from prepo.rollout import Rollout

CHECKPOINT_MAGIC = b"PREPOPOL"
CHECKPOINT_VERSION = 1
# magic, version, V, pad_id, window, embed_dim, hidden_dim, n_params
_HEADER = struct.Struct("<8sIIIIIIQ")


@dataclass(frozen=True)
class PolicyLayout:
    vocab_size: int
    pad_id: int
    window: int = 8
    embed_dim: int = 16
    hidden_dim: int = 32

    def __post_init__(self):
        if not 0 <= self.pad_id < self.vocab_size:
            raise ValueError("pad_id must be a vocabulary id")
        if min(self.window, self.embed_dim, self.hidden_dim) < 1:
            raise ValueError("layout dimensions must be positive")

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, W, d, H = self.vocab_size, self.window, self.embed_dim, self.hidden_dim
        return {
            "embed": (W, V, d),
            "w_hidden": (d, H),
            "b_hidden": (H,),
            "w_out": (H, V),
            "b_out": (V,),
        }

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def unflatten(self, vector: np.ndarray) -> dict[str, np.ndarray]:
        if vector.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {vector.shape}")
        out, offset = {}, 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            out[name] = vector[offset : offset + n].reshape(shape)
            offset += n
        return out

    def flatten(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(arrays[k], dtype=np.float64).ravel() for k in self.shapes])


@dataclass(frozen=True, eq=False)
class PolicyParams:
    layout: PolicyLayout
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "vector", vec)

    @property
    def arrays(self) -> dict[str, np.ndarray]:
        """Named parameter arrays (copies; edit and ``layout.flatten`` to build new params)."""
        return self.layout.unflatten(self.vector.copy())

    def replace(self, vector: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.layout, vector)

    def snapshot(self) -> "SnapshotPolicy":
        return SnapshotPolicy.of(self)


class SnapshotPolicy(PolicyParams):
    """Read-only copy of the parameters taken at rollout time."""

    @classmethod
    def of(cls, params: PolicyParams) -> "SnapshotPolicy":
        return cls(params.layout, params.vector)

    def __post_init__(self):
        super().__post_init__()
        vec = np.array(self.vector, copy=True)
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)


def zeros(layout: PolicyLayout) -> PolicyParams:
    return PolicyParams(layout, np.zeros(layout.size))


def init_params(layout: PolicyLayout, seed, scale: float = 0.1) -> PolicyParams:
    rng = np.random.Generator(np.random.Philox(seed))
    arrays = {
        # unit variance after mean-pooling the window
        "embed": rng.normal(0.0, np.sqrt(layout.window), layout.shapes["embed"]),
        "w_hidden": rng.normal(0.0, 1.0 / np.sqrt(layout.embed_dim), layout.shapes["w_hidden"]),
        "b_hidden": np.zeros(layout.hidden_dim),
        "w_out": rng.normal(0.0, scale, layout.shapes["w_out"]),
        "b_out": np.zeros(layout.vocab_size),
    }
    return PolicyParams(layout, layout.flatten(arrays))


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    logits: np.ndarray
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def entropy(self) -> float:
        p = self.probs
        return float(-np.sum(p * self.log_probs))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropies(log_probs: np.ndarray) -> np.ndarray:
    return -np.sum(np.exp(log_probs) * log_probs, axis=-1)


# --- contexts ---------------------------------------------------------------


def context_window(layout: PolicyLayout, context: Sequence[int]) -> np.ndarray:
    """Right-aligned last ``window`` tokens, left-filled with padding."""
    W = layout.window
    tail = list(context)[-W:] if len(context) else []
    return np.array([layout.pad_id] * (W - len(tail)) + tail, dtype=np.int64)


def teacher_forcing_windows(layout: PolicyLayout, prefix: Sequence[int], targets: Sequence[int]) -> np.ndarray:
    """Windows predicting each of ``targets`` given ``prefix`` plus earlier targets."""
    seq = list(prefix) + list(targets)
    start = len(prefix)
    return np.stack([context_window(layout, seq[: start + t]) for t in range(len(targets))])


def rollout_windows(layout: PolicyLayout, rollout: Rollout) -> np.ndarray:
    return teacher_forcing_windows(layout, rollout.prompt_tokens, rollout.tokens)


# --- forward / backward -------------------------------------------------------


def _check_ids(layout: PolicyLayout, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= layout.vocab_size):
        raise IndexError(f"token id outside vocabulary of size {layout.vocab_size}")


def _forward(params: PolicyParams, windows: np.ndarray):
    layout = params.layout
    a = layout.unflatten(params.vector)
    slots = np.arange(layout.window)
    h = a["embed"][slots, windows].mean(axis=1)  # (N, d)
    z = np.tanh(h @ a["w_hidden"] + a["b_hidden"])
    logits = z @ a["w_out"] + a["b_out"]
    return logits, (h, z)


def forward_batch(params: PolicyParams, windows: np.ndarray) -> np.ndarray:
    """Log-probabilities (N, V) for a batch of context windows (N, W)."""
    windows = np.asarray(windows, dtype=np.int64)
    _check_ids(params.layout, windows)
    logits, _ = _forward(params, windows)
    return log_softmax(logits)


def forward(params: PolicyParams, context: Sequence[int]) -> TokenDistribution:
    layout = params.layout
    if len(context) > 0:
        _check_ids(layout, np.asarray(context))
    logits, _ = _forward(params, context_window(layout, context)[None, :])
    return TokenDistribution(logits[0], log_softmax(logits)[0])


def token_log_probs(params: PolicyParams, windows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    _check_ids(params.layout, targets)
    lp = forward_batch(params, windows)
    return lp[np.arange(len(targets)), targets]


def _backprop(params: PolicyParams, windows: np.ndarray, cache, dlogits: np.ndarray) -> np.ndarray:
    """Flat parameter gradient given the gradient w.r.t. each row of logits."""
    layout = params.layout
    a = layout.unflatten(params.vector)
    h, z = cache
    g_w_out = z.T @ dlogits
    g_b_out = dlogits.sum(axis=0)
    dpre = (dlogits @ a["w_out"].T) * (1.0 - z * z)
    g_w_hidden = h.T @ dpre
    g_b_hidden = dpre.sum(axis=0)
    dh = (dpre @ a["w_hidden"].T) / layout.window
    g_embed = np.zeros(layout.shapes["embed"])
    slots = np.broadcast_to(np.arange(layout.window), windows.shape)
    np.add.at(g_embed, (slots.ravel(), windows.ravel()), np.repeat(dh, layout.window, axis=0))
    return layout.flatten(
        {
            "embed": g_embed,
            "w_hidden": g_w_hidden,
            "b_hidden": g_b_hidden,
            "w_out": g_w_out,
            "b_out": g_b_out,
        }
    )


def weighted_score(
    params: PolicyParams, windows: np.ndarray, targets: np.ndarray, coeffs: np.ndarray
) -> np.ndarray:
    """Flat gradient of ``sum_n coeffs[n] * log pi(targets[n] | windows[n])``."""
    layout = params.layout
    windows = np.asarray(windows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    _check_ids(layout, windows)
    _check_ids(layout, targets)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    logits, cache = _forward(params, windows)
    p = np.exp(log_softmax(logits))
    dlogits = -p * coeffs[:, None]
    dlogits[np.arange(len(targets)), targets] += coeffs
    return _backprop(params, windows, cache, dlogits)


def weighted_entropy_grad(params: PolicyParams, windows: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Flat gradient of ``sum_n coeffs[n] * H(pi(. | windows[n]))``."""
    windows = np.asarray(windows, dtype=np.int64)
    _check_ids(params.layout, windows)
    logits, cache = _forward(params, windows)
    lp = log_softmax(logits)
    p = np.exp(lp)
    ent = -(p * lp).sum(axis=1, keepdims=True)
    # dH/dz_k = -p_k (log p_k + H)
    dlogits = -p * (lp + ent) * np.asarray(coeffs, dtype=np.float64)[:, None]
    return _backprop(params, windows, cache, dlogits)


def grad_log_prob(params: PolicyParams, context: Sequence[int], token: int) -> np.ndarray:
    window = context_window(params.layout, context)[None, :]
    return weighted_score(params, window, np.array([token]), np.ones(1))


# --- perplexity -------------------------------------------------------------


def prompt_ppl(params: PolicyParams, prompt) -> float:
    return float(prompt_ppls(params, [prompt])[0])


def prompt_ppls(params: PolicyParams, prompts: Sequence) -> np.ndarray:
    """Teacher-forced perplexity of each prompt's own tokens, from an empty prefix."""
    layout = params.layout
    windows, targets, owner = [], [], []
    for k, p in enumerate(prompts):
        if len(p.tokens) < 1:
            raise ValueError("prompt must contain at least one token")
        windows.append(teacher_forcing_windows(layout, (), p.tokens))
        targets.extend(p.tokens)
        owner.extend([k] * len(p.tokens))
    lp = token_log_probs(params, np.concatenate(windows), np.array(targets))
    owner = np.array(owner)
    nll = -np.bincount(owner, weights=lp, minlength=len(prompts))
    lengths = np.bincount(owner, minlength=len(prompts))
    return np.exp(nll / lengths)


# --- sampling ---------------------------------------------------------------


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_rollouts(
    snapshot: PolicyParams,
    prompts: Sequence,
    uniforms: np.ndarray,
    eos_id: int,
    temperature: float = 1.0,
) -> list[Rollout]:
    """Sample one completion per prompt, consuming row ``n`` of ``uniforms`` for prompt ``n``.

    Sampling uses ``logits / temperature``; recorded log-probs and entropies
    are those of the untempered snapshot policy, which is the denominator of
    the importance ratio.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    uniforms = np.asarray(uniforms, dtype=np.float64)
    n, max_len = uniforms.shape
    if n != len(prompts) or max_len < 1:
        raise ValueError("uniforms must have one row per prompt and at least one column")
    layout = snapshot.layout
    seqs = [list(p.tokens) for p in prompts]
    out_tokens = [[] for _ in range(n)]
    out_lp = [[] for _ in range(n)]
    out_ent = [[] for _ in range(n)]
    active = np.arange(n)
    for t in range(max_len):
        if active.size == 0:
            break
        windows = np.stack([context_window(layout, seqs[k]) for k in active])
        logits, _ = _forward(snapshot, windows)
        lp = log_softmax(logits)
        ent = entropies(lp)
        sample_lp = lp if temperature == 1.0 else log_softmax(logits / temperature)
        choice = _inverse_cdf(np.exp(sample_lp), uniforms[active, t])
        still = []
        for row, k in enumerate(active):
            tok = int(choice[row])
            seqs[k].append(tok)
            out_tokens[k].append(tok)
            out_lp[k].append(lp[row, tok])
            out_ent[k].append(max(ent[row], 0.0))
            if tok != eos_id:
                still.append(k)
        active = np.array(still, dtype=np.int64)
    return [
        Rollout(p.id, tuple(p.tokens), tuple(out_tokens[k]), np.array(out_lp[k]), np.array(out_ent[k]))
        for k, p in enumerate(prompts)
    ]


def rollout_rng(seed) -> np.random.Generator:
    """Counter-based Philox stream; ``seed`` may be an int or a sequence of ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def sample_rollout(
    snapshot: PolicyParams,
    prompt,
    temperature: float,
    max_len: int,
    rng_seed,
    eos_id: int,
) -> Rollout:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    u = rollout_rng(rng_seed).random((1, max_len))
    return sample_rollouts(snapshot, [prompt], u, eos_id, temperature)[0]


# --- checkpoints --------------------------------------------------------------
#
# Byte layout (little-endian):
#   0   8s  magic b"PREPOPOL"
#   8   u32 format version (1)
#   12  u32 vocab size V
#   16  u32 pad id
#   20  u32 window
#   24  u32 embed dim
#   28  u32 hidden dim
#   32  u64 parameter count P
#   40  P x f64 flat parameter vector in layout order
#       (embed, w_hidden, b_hidden, w_out, b_out; each C-order)


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    lay = params.layout
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        lay.vocab_size,
        lay.pad_id,
        lay.window,
        lay.embed_dim,
        lay.hidden_dim,
        lay.size,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(params.vector.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> PolicyParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, V, pad, W, d, H, n = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a policy checkpoint (magic={magic!r}, version={version})")
    layout = PolicyLayout(V, pad, W, d, H)
    if n != layout.size or len(data) != _HEADER.size + 8 * n:
        raise ValueError(f"{path}: parameter count does not match layout")
    vec = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return PolicyParams(layout, vec)
