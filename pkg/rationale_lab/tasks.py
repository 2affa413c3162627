"""Synthetic chain-of-thought task families.

A task instance is a query ``x`` (a token sequence ending in EQ), an answer digit ``y``
and an optional golden rationale. Answers are extracted from rationales by
:func:`answer_of`, which picks the last digit emitted before the first EOS, so many
distinct rationales share one answer.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import product

import numpy as np

SUM_CHAIN = "sum_chain"
FAMILIES = (SUM_CHAIN,)
MAX_ENUMERABLE = 10**7


class TaskSpecError(ValueError):
    """Raised when a task family specification violates its invariants."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense token alphabet for one task family.

    Digits take ids ``0..base-1`` and EOS is ``base``, so the rationale alphabet
    (what a policy can emit) is the prefix ``0..base`` of the id space. Operator and
    delimiter tokens follow.
    """

    base: int

    @property
    def eos(self) -> int:
        return self.base

    @property
    def plus(self) -> int:
        return self.base + 1

    @property
    def eq(self) -> int:
        return self.base + 2

    @property
    def ans(self) -> int:
        return self.base + 3

    @property
    def sep(self) -> int:
        return self.base + 4

    @property
    def size(self) -> int:
        return self.base + 5

    @property
    def output_size(self) -> int:
        """Number of emittable tokens (digits plus EOS)."""
        return self.base + 1

    def role(self, token: int) -> str:
        if not 0 <= token < self.size:
            raise KeyError(f"token {token} outside vocabulary of size {self.size}")
        if token < self.base:
            return f"digit({token})"
        return ("EOS", "PLUS", "EQ", "ANS", "SEP")[token - self.base]

    def is_digit(self, token: int) -> bool:
        return 0 <= token < self.base

    def render(self, tokens: Sequence[int]) -> str:
        names = {self.eos: "EOS", self.plus: "+", self.eq: "=", self.ans: "ANS", self.sep: "SEP"}
        return " ".join(str(t) if self.is_digit(t) else names[t] for t in tokens)


@dataclass(frozen=True)
class TaskFamilySpec:
    family: str = SUM_CHAIN
    base: int = 3
    chain_length: int = 2
    max_rationale_len: int = 4

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise TaskSpecError(f"unknown task family {self.family!r}")
        if not 2 <= self.base <= 10:
            raise TaskSpecError(f"base must be in [2, 10], got {self.base}")
        if self.chain_length < 1:
            raise TaskSpecError(f"chain_length must be >= 1, got {self.chain_length}")
        if self.max_rationale_len < 2:
            raise TaskSpecError(f"max_rationale_len must be >= 2, got {self.max_rationale_len}")
        if self.max_rationale_len < self.golden_length:
            raise TaskSpecError(f"max_rationale_len {self.max_rationale_len} is shorter than the golden rationale ({self.golden_length} tokens)")
        if self.rationale_space_size > MAX_ENUMERABLE:
            raise TaskSpecError(f"rationale space V^T_max = {self.rationale_space_size} exceeds the enumeration bound {MAX_ENUMERABLE}")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.base)

    @property
    def rationale_space_size(self) -> int:
        return int((self.base + 1) ** self.max_rationale_len)

    @property
    def golden_length(self) -> int:
        return self.chain_length + 1

    @property
    def n_queries(self) -> int:
        return int(self.base**self.chain_length)


@dataclass(frozen=True)
class TaskInstance:
    x: tuple[int, ...]
    y: int
    golden: tuple[int, ...] | None = None
    digits: tuple[int, ...] = field(default=(), compare=False)


def answer_of(z: Sequence[int], vocab: Vocabulary, t_max: int | None = None) -> int | None:
    """Extract the answer of a rationale.

    Args:
        z: Rationale tokens.
        vocab: Vocabulary the tokens belong to.
        t_max: Only the first ``t_max`` tokens are inspected when given.

    Returns:
        The last digit token strictly before the first EOS, or ``None`` when ``z`` has
        no EOS (within ``t_max``) or no digit before it.
    """
    window = z if t_max is None else z[:t_max]
    answer = None
    for token in window:
        if token == vocab.eos:
            return answer
        if vocab.is_digit(token):
            answer = int(token)
    return None


def golden_rationale(digits: Sequence[int], base: int) -> tuple[int, ...]:
    partial = np.cumsum(digits) % base
    # partial sums s_2..s_L, then the answer and EOS
    return (*(int(s) for s in partial[1:]), int(partial[-1]), base)


def instance_from_digits(spec: TaskFamilySpec, digits: Sequence[int]) -> TaskInstance:
    vocab = spec.vocab
    if len(digits) != spec.chain_length or any(not 0 <= d < spec.base for d in digits):
        raise TaskSpecError(f"digits {list(digits)} do not fit {spec}")
    x: list[int] = []
    for i, d in enumerate(digits):
        if i:
            x.append(vocab.plus)
        x.append(int(d))
    x.append(vocab.eq)
    y = int(sum(digits) % spec.base)
    return TaskInstance(x=tuple(x), y=y, golden=golden_rationale(digits, spec.base), digits=tuple(int(d) for d in digits))


def sample_instance(spec: TaskFamilySpec, rng: np.random.Generator) -> TaskInstance:
    digits = rng.integers(0, spec.base, size=spec.chain_length)
    return instance_from_digits(spec, digits.tolist())


def instance_at(spec: TaskFamilySpec, seed: int, index: int) -> TaskInstance:
    """Regenerate instance ``index`` of the stream identified by ``seed``."""
    return sample_instance(spec, np.random.default_rng([seed, 0, index]))


def all_instances(spec: TaskFamilySpec) -> list[TaskInstance]:
    """Every query of the family, in lexicographic digit order."""
    return [instance_from_digits(spec, digits) for digits in product(range(spec.base), repeat=spec.chain_length)]


