"""In-token rationality optimization.

Per query: roll out ``G`` rationales from the current policy, keep the ones whose
answer is correct, and at every position of every kept rationale draw ``n - 1``
alternative tokens from the forward policy next to the rationale's own token. Each
candidate is weighted by its clipped correction factor

    w = pi(token | x ++ [ANS, y, SEP], prefix) / pi(token | x, prefix)

and the update ascends ``(1 / (|z| n)) sum_t sum_i w_t^i log pi(z_t^i | x, z_<t)``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.stats import entropy

from rationale_lab.policy import Policy, add_logit_grad, forward_context, grad_logprob, logprob, next_dist, posterior_context, sample_sequence, sample_token, score_vector
from rationale_lab.tasks import TaskFamilySpec, TaskInstance, answer_of

if TYPE_CHECKING:
    from rationale_lab.training import TrainingReport

logger = logging.getLogger(__name__)

POOLING = ("mean", "pool")
REFERENCE_LLM_BATCH_SIZE = 128
REFERENCE_LLM_LEARNING_RATE = 5e-7


class ItroError(ValueError):
    """Raised when an ITRO step cannot be formed."""


@dataclass(frozen=True)
class ItroConfig:
    group_size: int = 4
    n_candidates: int = 5
    clip_max: float = 200.0
    learning_rate: float = 0.05
    temperature: float = 0.6
    t_max: int = 4
    stop_grad_through_w: bool = True
    pooling: str = "mean"
    posterior_sft_coef: float = 0.0

    def __post_init__(self) -> None:
        if self.group_size < 1:
            raise ItroError("rollout.G must be >= 1")
        if self.n_candidates < 1:
            raise ItroError("itro.n must be >= 1")
        if self.clip_max <= 0:
            raise ItroError("itro.clip_max must be > 0")
        if self.learning_rate < 0:
            raise ItroError("learning_rate must be >= 0")
        if self.temperature <= 0:
            raise ItroError("rollout.temperature must be > 0")
        if self.t_max < 2:
            raise ItroError("task.max_rationale_len must be >= 2")
        if self.pooling not in POOLING:
            raise ItroError(f"itro.pooling must be one of {POOLING}")
        if self.posterior_sft_coef < 0:
            raise ItroError("itro.posterior_sft_coef must be >= 0")


@dataclass(frozen=True)
class Rollout:
    z: tuple[int, ...]
    reward: int
    valid: bool
    answer: int | None = None


@dataclass(frozen=True)
class RolloutGroup:
    query_index: int
    rationales: tuple[Rollout, ...]

    @property
    def rewards(self) -> list[float]:
        return [float(r.reward) for r in self.rationales]

    def __len__(self) -> int:
        return len(self.rationales)


@dataclass(frozen=True)
class Candidate:
    token: int
    forward_prob: float
    conditioned_prob: float
    w: float
    raw_ratio: float
    is_ground_truth: bool = False


@dataclass(frozen=True)
class CandidateStep:
    position: int
    candidates: tuple[Candidate, ...]


@dataclass
class ItroStats:
    mean_w: float = 0.0
    clip_fraction: float = 0.0
    candidate_entropy: float = 0.0
    n_candidates: int = 0
    n_rationales: int = 0
    steps: list[CandidateStep] = field(default_factory=list, repr=False)


def rollout_group(policy: Policy, instance: TaskInstance, config: ItroConfig, rng: np.random.Generator, query_index: int = 0) -> RolloutGroup:
    context = forward_context(instance)
    rationales = []
    for _ in range(config.group_size):
        z = sample_sequence(policy, context, config.temperature, config.t_max, rng)
        answer = answer_of(z, policy.vocab, config.t_max)
        rationales.append(Rollout(z=z, reward=int(answer == instance.y), valid=answer is not None, answer=answer))
    return RolloutGroup(query_index=query_index, rationales=tuple(rationales))


def filter_valid(group: RolloutGroup, y: int) -> list[tuple[int, ...]]:
    """Rationales whose answer is ``y``, in rollout order, duplicates kept."""
    return [r.z for r in group.rationales if r.answer == y]


def raw_correction_factor(policy: Policy, instance: TaskInstance, z_prefix: Sequence[int], token: int) -> float:
    forward = next_dist(policy, forward_context(instance), z_prefix)[token]
    if forward <= 0:
        raise ItroError(f"unsampleable candidate {token} at position {len(z_prefix)}")
    conditioned = next_dist(policy, posterior_context(instance, policy.vocab), z_prefix)[token]
    return float(conditioned / forward)


def correction_factor(policy: Policy, instance: TaskInstance, z_prefix: Sequence[int], token: int, w_max: float) -> float:
    return min(raw_correction_factor(policy, instance, z_prefix, token), w_max)


def token_log_weights(policy: Policy, instance: TaskInstance, z: Sequence[int]) -> np.ndarray:
    """Unclipped per-token log correction factors along ``z``."""
    fwd = forward_context(instance)
    cond = posterior_context(instance, policy.vocab)
    return np.array([math.log(next_dist(policy, cond, z[:t])[z[t]]) - math.log(next_dist(policy, fwd, z[:t])[z[t]]) for t in range(len(z))])


def sequence_log_weight(policy: Policy, instance: TaskInstance, z: Sequence[int]) -> float:
    """Sequence-level log importance weight ``log pi(z|x+y) - log pi(z|x)``."""
    return logprob(policy, posterior_context(instance, policy.vocab), z) - logprob(policy, forward_context(instance), z)


def sample_candidates(
    policy: Policy,
    instance: TaskInstance,
    z_prefix: Sequence[int],
    gt_token: int,
    n: int,
    rng: np.random.Generator,
    w_max: float = 200.0,
) -> CandidateStep:
    """``n - 1`` i.i.d. forward draws followed by the ground-truth token."""
    if n < 1:
        raise ItroError("n must be >= 1")
    p = next_dist(policy, forward_context(instance), z_prefix)
    q = next_dist(policy, posterior_context(instance, policy.vocab), z_prefix)
    tokens = sample_token(policy, forward_context(instance), z_prefix, rng, n - 1) if n > 1 else []
    candidates = []
    for i, token in enumerate([*tokens, gt_token]):
        if p[token] <= 0:
            raise ItroError(f"unsampleable candidate {token} at position {len(z_prefix)}")
        ratio = float(q[token] / p[token])
        candidates.append(
            Candidate(
                token=token,
                forward_prob=float(p[token]),
                conditioned_prob=float(q[token]),
                w=min(ratio, w_max),
                raw_ratio=ratio,
                is_ground_truth=i == n - 1,
            )
        )
    return CandidateStep(position=len(z_prefix), candidates=tuple(candidates))


def _rationale_terms(policy: Policy, instance: TaskInstance, z: Sequence[int], config: ItroConfig, rng: np.random.Generator, stats: ItroStats) -> tuple[float, np.ndarray]:
    """Unnormalised objective and gradient of one rationale: sums over positions and candidates."""
    fwd = forward_context(instance)
    cond = posterior_context(instance, policy.vocab)
    grad = np.zeros(policy.n_params)
    value = 0.0
    for t in range(len(z)):
        step = sample_candidates(policy, instance, z[:t], z[t], config.n_candidates, rng, config.clip_max)
        stats.steps.append(step)
        p = np.array(next_dist(policy, fwd, z[:t]))
        stats.candidate_entropy += float(entropy(p, base=2))
        dlogits = np.zeros(policy.vocab_size)
        for c in step.candidates:
            log_p = math.log(c.forward_prob)
            value += c.w * log_p
            dlogits += c.w * score_vector(p, c.token)
            if not config.stop_grad_through_w and c.raw_ratio < config.clip_max:
                # d(w log p) picks up log p * w * (dlog q - dlog p) when w is not clipped
                q = next_dist(policy, cond, z[:t])
                add_logit_grad(policy, grad, cond, z[:t], log_p * c.w * score_vector(q, c.token))
                dlogits -= log_p * c.w * score_vector(p, c.token)
        add_logit_grad(policy, grad, fwd, z[:t], dlogits)
    return value, grad


def itro_step_grad(
    policy: Policy,
    instance: TaskInstance,
    valid_rationales: Sequence[Sequence[int]],
    config: ItroConfig,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray, ItroStats]:
    """Stochastic ITRO objective and its ascent gradient for one query.

    With ``pooling == "mean"`` each rationale is normalised by ``1 / (|z| n)`` and the
    rationales are averaged; ``pool`` normalises all of them together by the total
    candidate count.

    Raises:
        ItroError: If ``valid_rationales`` is empty.
    """
    if not valid_rationales:
        raise ItroError("no valid rationales")
    stats = ItroStats(n_rationales=len(valid_rationales))
    n = config.n_candidates
    value = 0.0
    grad = np.zeros(policy.n_params)
    total_tokens = sum(len(z) for z in valid_rationales)
    for z in valid_rationales:
        v, g = _rationale_terms(policy, instance, z, config, rng, stats)
        scale = 1.0 / (len(z) * n * len(valid_rationales)) if config.pooling == "mean" else 1.0 / (total_tokens * n)
        value += scale * v
        grad += scale * g

    weights = [c.w for s in stats.steps for c in s.candidates]
    stats.n_candidates = len(weights)
    stats.mean_w = float(np.mean(weights))
    stats.clip_fraction = sum(c.raw_ratio > config.clip_max for s in stats.steps for c in s.candidates) / len(weights)
    stats.candidate_entropy /= len(stats.steps)
    return value, grad, stats


def posterior_refinement_grad(policy: Policy, instance: TaskInstance, valid_rationales: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean of ``(1/|z|) grad log pi(z | x ++ [ANS, y, SEP])`` over the kept rationales."""
    cond = posterior_context(instance, policy.vocab)
    grad = np.zeros(policy.n_params)
    for z in valid_rationales:
        grad += grad_logprob(policy, cond, z) / len(z)
    return grad / len(valid_rationales)


def train(config: ItroConfig, task_spec: TaskFamilySpec, seed: int, **overrides: object) -> TrainingReport:
    """Run ITRO training; a shortcut to :func:`rationale_lab.training.train` with ``method = itro``.

    Keyword overrides are forwarded to :class:`rationale_lab.config.RunConfig`.
    """
    from rationale_lab.config import RunConfig
    from rationale_lab.training import train as run_training

    run_config = RunConfig(method="itro", task=task_spec, itro=config, seed=seed, **overrides)  # type: ignore[arg-type]
    return run_training(run_config)
