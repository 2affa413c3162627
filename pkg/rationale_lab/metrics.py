from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy.stats import entropy

from rationale_lab.policy import Policy, forward_context, greedy_sequence, next_dist, posterior_context, sample_sequence
from rationale_lab.tasks import TaskInstance, answer_of


@dataclass(frozen=True)
class Decode:
    """Decoding protocol: ``greedy`` or ``sample`` with ``k`` draws at ``temperature`` (avg@k)."""

    mode: str = "greedy"
    temperature: float = 1.0
    k: int = 32

    def __post_init__(self) -> None:
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.temperature <= 0 or self.k < 1:
            raise ValueError("sample decoding needs temperature > 0 and k >= 1")


@dataclass(frozen=True)
class TokenAnnotation:
    position: int
    token: int
    forward_prob: float
    conditioned_prob: float
    w: float
    entropy_bits: float


def entropy_bits(probs: np.ndarray) -> float:
    """Shannon entropy in bits."""
    return float(entropy(probs, base=2))


def eval_accuracy(policy: Policy, instances: Sequence[TaskInstance], decode: Decode | None = None, rng: np.random.Generator | None = None) -> float:
    """Fraction of correct answers: greedy pass@1, or the mean over instances of correct/k when sampling."""
    if not instances:
        raise ValueError("eval_accuracy needs at least one instance")
    decode = decode or Decode()
    t_max = policy.task.max_rationale_len
    if decode.mode == "greedy":
        hits = [answer_of(greedy_sequence(policy, forward_context(inst), t_max), policy.vocab, t_max) == inst.y for inst in instances]
        return float(np.mean(hits))
    if rng is None:
        raise ValueError("sample decoding needs a generator")
    scores = []
    for inst in instances:
        context = forward_context(inst)
        correct = sum(answer_of(sample_sequence(policy, context, decode.temperature, t_max, rng), policy.vocab, t_max) == inst.y for _ in range(decode.k))
        scores.append(correct / decode.k)
    return float(np.mean(scores))


def mean_rationale_length(
    policy: Policy,
    instances: Sequence[TaskInstance],
    k: int,
    temperature: float,
    rng: np.random.Generator,
    correct_only: bool = False,
) -> float:
    """Mean token count (EOS included) of ``k`` sampled rationales per instance.

    With ``correct_only`` only rationales that reach the right answer are counted;
    NaN is returned when there are none.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    t_max = policy.task.max_rationale_len
    lengths = []
    for inst in instances:
        context = forward_context(inst)
        for _ in range(k):
            z = sample_sequence(policy, context, temperature, t_max, rng)
            if correct_only and answer_of(z, policy.vocab, t_max) != inst.y:
                continue
            lengths.append(len(z))
    return float(np.mean(lengths)) if lengths else float("nan")


def annotate(policy: Policy, instance: TaskInstance, z: Sequence[int], w_max: float = 200.0) -> list[TokenAnnotation]:
    """Per-token forward/conditioned probabilities, clipped correction factor and forward entropy."""
    fwd = forward_context(instance)
    cond = posterior_context(instance, policy.vocab)
    out = []
    for t, token in enumerate(z):
        p = next_dist(policy, fwd, z[:t])
        q = next_dist(policy, cond, z[:t])
        if p[token] <= 0:
            raise ValueError(f"zero forward probability at position {t}")
        out.append(
            TokenAnnotation(
                position=t,
                token=int(token),
                forward_prob=float(p[token]),
                conditioned_prob=float(q[token]),
                w=float(min(q[token] / p[token], w_max)),
                entropy_bits=entropy_bits(p),
            )
        )
    return out


@dataclass(frozen=True)
class MetricsRecord:
    """One line of a run's metrics stream.

    Optional fields are ``None`` when they do not apply to the step or method and are
    left out of the serialized line. ``wall_ms`` is host-dependent and goes to the
    separate timings stream.
    """

    step: int
    method: str
    objective_value: float = 0.0
    mean_reward: float = 0.0
    valid_fraction: float = 0.0
    mean_rationale_len: float = 0.0
    skipped: bool = False
    n_skipped_queries: int = 0
    mean_w: float | None = None
    clip_fraction: float | None = None
    kl_penalty: float | None = None
    accuracy: float | None = None
    mean_correct_len: float | None = None
    wall_ms: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict[str, Any]:
        out = {k: v for k, v in asdict(self).items() if v is not None}
        out.pop("wall_ms")
        return out
