"""Synthetic modular-arithmetic prompts and an exact-match reward verifier.

A prompt is an expression such as ``3 + 4 - 1 =`` over digits ``0..m-1``;
the answer is the value of the expression (evaluated left to right) modulo
``m``, emitted as a single digit token followed by the terminator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EOS = "<eos>"
PAD = "<pad>"
EQUALS = "="
OPERATORS = ("+", "-")


class CapacityError(ValueError):
    """The requested number of distinct prompts does not exist."""


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary symbols must be distinct")
        if len(self.tokens) < 8:
            raise ValueError(f"vocabulary needs at least 8 symbols, got {len(self.tokens)}")
        if self.tokens.count(EOS) != 1 or PAD not in self.tokens:
            raise ValueError("vocabulary needs exactly one terminator and a padding symbol")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.tokens)})

    @classmethod
    def for_modulus(cls, modulus: int) -> "Vocab":
        if modulus < 2:
            raise ValueError("modulus must be at least 2")
        digits = tuple(str(d) for d in range(modulus))
        return cls(digits + OPERATORS + (EQUALS, EOS, PAD))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def modulus(self) -> int:
        return sum(1 for s in self.tokens if s.isdigit())

    def id(self, symbol: str) -> int:
        return self._index[symbol]

    def encode(self, symbols: Iterable[str]) -> tuple[int, ...]:
        return tuple(self._index[s] for s in symbols)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Prompt:
    id: int
    tokens: tuple[int, ...]
    answer: tuple[int, ...]
    difficulty_tag: int

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("prompt must contain at least one token")


@dataclass(frozen=True)
class RewardSpec:
    correct_reward: float = 1.0
    incorrect_reward: float = 0.0

    def __post_init__(self):
        if not self.correct_reward > self.incorrect_reward:
            raise ValueError("correct_reward must exceed incorrect_reward")


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of the synthetic task family."""

    modulus: int = 5
    max_prompt_len: int = 16
    vocab: Vocab = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vocab", Vocab.for_modulus(self.modulus))


def evaluate_expression(operands: Sequence[int], operators: Sequence[str], modulus: int) -> int:
    value = operands[0]
    for op, x in zip(operators, operands[1:]):
        value = value + x if op == "+" else value - x
    return value % modulus


def expression_count(level: int, modulus: int) -> int:
    return modulus**level * len(OPERATORS) ** (level - 1)


def _encode_expression(operands, operators, vocab: Vocab) -> tuple[int, ...]:
    symbols = [str(operands[0])]
    for op, x in zip(operators, operands[1:]):
        symbols += [op, str(x)]
    symbols.append(EQUALS)
    return vocab.encode(symbols)


def generate_dataset(
    seed: int,
    n_prompts: int,
    level_range: tuple[int, int],
    task: TaskSpec | None = None,
) -> list[Prompt]:
    """Draw ``n_prompts`` distinct expressions with operand counts in ``level_range``.

    Levels are drawn uniformly from the inclusive range. A level whose
    expression space is exhausted is dropped from the draw so that small
    levels never stall generation.
    """
    task = task or TaskSpec()
    lo, hi = level_range
    if n_prompts < 1:
        raise ValueError("n_prompts must be positive")
    if lo < 1 or hi < lo:
        raise ValueError(f"empty or invalid level range {level_range}")
    if 2 * hi > task.max_prompt_len:
        raise ValueError(f"level {hi} exceeds max_prompt_len={task.max_prompt_len}")
    capacity = sum(expression_count(lv, task.modulus) for lv in range(lo, hi + 1))
    if n_prompts > capacity:
        raise CapacityError(
            f"levels {lo}..{hi} hold only {capacity} distinct prompts, {n_prompts} requested"
        )

    rng = np.random.Generator(np.random.Philox(seed))
    used: dict[int, int] = {lv: 0 for lv in range(lo, hi + 1)}
    seen: set[tuple[int, ...]] = set()
    prompts: list[Prompt] = []
    while len(prompts) < n_prompts:
        open_levels = [lv for lv in used if used[lv] < expression_count(lv, task.modulus)]
        level = open_levels[int(rng.integers(len(open_levels)))]
        operands = [int(v) for v in rng.integers(0, task.modulus, size=level)]
        operators = [OPERATORS[int(i)] for i in rng.integers(0, len(OPERATORS), size=level - 1)]
        tokens = _encode_expression(operands, operators, task.vocab)
        if tokens in seen:
            continue
        seen.add(tokens)
        used[level] += 1
        answer = task.vocab.encode([str(evaluate_expression(operands, operators, task.modulus))])
        prompts.append(Prompt(len(prompts), tokens, answer, level))
    return prompts


def canonicalize(completion: Sequence[int], vocab: Vocab) -> tuple[int, ...] | None:
    """Cut at the first terminator and drop padding; ``None`` if unterminated."""
    completion = list(completion)
    if vocab.eos_id not in completion:
        return None
    head = completion[: completion.index(vocab.eos_id)]
    return tuple(t for t in head if t != vocab.pad_id)


def verify(prompt: Prompt, completion: Sequence[int], spec: RewardSpec, vocab: Vocab) -> float:
    if canonicalize(completion, vocab) == prompt.answer:
        return spec.correct_reward
    return spec.incorrect_reward


def enumerate_rewarded(prompt: Prompt, vocab: Vocab, max_len: int = 3) -> set[tuple[int, ...]]:
    """Canonical forms of every rewarded completion up to ``max_len`` tokens."""
    found = set()
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(vocab.size), repeat=n):
            if verify(prompt, seq, RewardSpec(), vocab) > 0:
                found.add(canonicalize(seq, vocab))
    return found


# Line-delimited records: ``id, difficulty_tag, token_ids, answer_ids``
# with space-separated ids inside the last two fields.


def dump_dataset(prompts: Sequence[Prompt], path: str | Path) -> None:
    with open(path, "w") as f:
        for p in prompts:
            toks = " ".join(map(str, p.tokens))
            ans = " ".join(map(str, p.answer))
            f.write(f"{p.id}, {p.difficulty_tag}, {toks}, {ans}\n")


def load_dataset(path: str | Path) -> list[Prompt]:
    prompts = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = [s.strip() for s in line.split(",")]
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            pid, tag, toks, ans = parts
            prompts.append(
                Prompt(
                    int(pid),
                    tuple(int(t) for t in toks.split()),
                    tuple(int(t) for t in ans.split()),
                    int(tag),
                )
            )
    return prompts
