"""Comparison objectives over the same rollout substrate as ITRO.

Each ``*_grad`` function returns ``(objective, ascent_gradient, stats)`` for one query
with the sampled group frozen, so every gradient is the exact derivative of the
returned surrogate objective.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import log_softmax, softmax

from rationale_lab.itro import RolloutGroup
from rationale_lab.policy import Policy, add_logit_grad, answer_state, forward_context, grad_logprob, logprob, score_vector, state_logits
from rationale_lab.tasks import TaskInstance

logger = logging.getLogger(__name__)

METHODS = ("sft", "latro", "raftpp", "gpg", "grpo")
NORM_MODES = ("std", "fixed")

Surrogate = tuple[float, np.ndarray, dict[str, Any]]


class BaselineError(ValueError):
    """Raised when a baseline objective is undefined for the given inputs."""


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "grpo"
    clip_epsilon: float = 0.2
    kl_beta: float = 0.0
    latro_kl_coef: float = 0.01
    norm_mode: str = "std"
    norm_constant: float = 1.0
    advantage_epsilon: float = 1e-8
    reference_checkpoint: str | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise BaselineError(f"unknown baseline method {self.method!r}")
        if self.clip_epsilon <= 0:
            raise BaselineError("baseline.clip_epsilon must be > 0")
        if self.kl_beta < 0:
            raise BaselineError("baseline.kl_beta must be >= 0")
        if self.latro_kl_coef < 0:
            raise BaselineError("baseline.latro_kl_coef must be >= 0")
        if self.norm_mode not in NORM_MODES:
            raise BaselineError(f"baseline.norm_mode must be one of {NORM_MODES}")
        if self.norm_constant <= 0:
            raise BaselineError("baseline.norm_constant must be > 0")
        if self.advantage_epsilon <= 0:
            raise BaselineError("baseline.advantage_epsilon must be > 0")


def sft_grad(policy: Policy, instance: TaskInstance) -> Surrogate:
    """Length-normalised log-likelihood of the golden rationale."""
    if instance.golden is None:
        raise BaselineError("sft needs a golden rationale")
    context = forward_context(instance)
    n = len(instance.golden)
    return logprob(policy, context, instance.golden) / n, grad_logprob(policy, context, instance.golden) / n, {}


def filtered_sft_grad(policy: Policy, instance: TaskInstance, rationales: Sequence[Sequence[int]]) -> Surrogate:
    """Mean over ``rationales`` of the length-normalised log-likelihood (self-generated SFT)."""
    if not rationales:
        raise BaselineError("empty filtered set")
    context = forward_context(instance)
    value = 0.0
    grad = np.zeros(policy.n_params)
    for z in rationales:
        value += logprob(policy, context, z) / len(z)
        grad += grad_logprob(policy, context, z) / len(z)
    return value / len(rationales), grad / len(rationales), {}


def latro_reward(policy: Policy, instance: TaskInstance, z: Sequence[int]) -> float:
    """``log pi(y | x, z, ANS)``: how well rationale ``z`` predicts the answer."""
    context, prefix = answer_state(instance, z, policy.vocab)
    return float(log_softmax(state_logits(policy, context, prefix))[instance.y])


def latro_grad(policy: Policy, instance: TaskInstance, group: RolloutGroup, config: BaselineConfig, reference_policy: Policy) -> Surrogate:
    """REINFORCE with a leave-one-out baseline on the answer log-likelihood reward.

    The KL to ``reference_policy`` is estimated on the group with the squared
    log-ratio ``0.5 * (log pi - log pi_0)^2``, whose gradient is the score-function
    KL gradient.
    """
    G = len(group)
    if G < 2:
        raise BaselineError("latro needs a group of at least 2 for the leave-one-out baseline")
    context = forward_context(instance)
    rewards = np.array([latro_reward(policy, instance, r.z) for r in group.rationales])
    baselines = (rewards.sum() - rewards) / (G - 1)
    advantages = rewards - baselines
    value = 0.0
    kl = 0.0
    grad = np.zeros(policy.n_params)
    for r, adv in zip(group.rationales, advantages, strict=True):
        lp = logprob(policy, context, r.z)
        log_ratio = lp - logprob(reference_policy, context, r.z)
        score = grad_logprob(policy, context, r.z)
        value += adv * lp - config.latro_kl_coef * 0.5 * log_ratio**2
        kl += 0.5 * log_ratio**2
        grad += (adv - config.latro_kl_coef * log_ratio) * score
    return value / G, grad / G, {"kl_penalty": kl / G, "mean_latro_reward": float(rewards.mean())}


def _clipped_ratio_terms(
    policy: Policy,
    rollout_policy: Policy,
    instance: TaskInstance,
    z: Sequence[int],
    advantage: float,
    epsilon: float,
    grad: np.ndarray,
    scale: float,
) -> tuple[float, int]:
    """Accumulate ``scale * sum_t min(r_t A, clip(r_t) A)`` and its gradient; returns (value, clipped tokens)."""
    context = forward_context(instance)
    value = 0.0
    clipped = 0
    for t in range(len(z)):
        log_p = log_softmax(state_logits(policy, context, z[:t]))
        log_old = log_softmax(state_logits(rollout_policy, context, z[:t]))
        ratio = math.exp(log_p[z[t]] - log_old[z[t]])
        bounded = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
        unclipped, clipped_term = ratio * advantage, bounded * advantage
        if clipped_term < unclipped:
            # the clipped branch is constant in theta
            value += scale * clipped_term
            clipped += 1
            continue
        value += scale * unclipped
        if advantage != 0.0:
            add_logit_grad(policy, grad, context, z[:t], scale * advantage * ratio * score_vector(np.exp(log_p), z[t]))
    return value, clipped


def raftpp_grad(policy: Policy, rollout_policy: Policy, instance: TaskInstance, group: RolloutGroup, config: BaselineConfig) -> Surrogate:
    """Clipped importance-weighted SFT on the positively rewarded rationales."""
    kept = [r.z for r in group.rationales if r.reward == 1]
    if not kept:
        raise BaselineError("empty filtered set")
    grad = np.zeros(policy.n_params)
    value = 0.0
    clipped = 0
    for z in kept:
        v, c = _clipped_ratio_terms(policy, rollout_policy, instance, z, 1.0, config.clip_epsilon, grad, 1.0 / (len(z) * len(kept)))
        value += v
        clipped += c
    return value, grad, {"clip_fraction": clipped / sum(len(z) for z in kept)}


def group_advantages(rewards: Sequence[float], mode: str = "std", advantage_epsilon: float = 1e-8, norm_constant: float = 1.0) -> np.ndarray:
    """Group-relative advantages.

    Args:
        rewards: Rewards of one group.
        mode: ``std`` divides by the population standard deviation plus
            ``advantage_epsilon``; ``fixed`` divides by ``norm_constant``.
        advantage_epsilon: Guard against a zero standard deviation.
        norm_constant: Fixed normaliser for ``fixed`` mode.

    Returns:
        Advantages, centred on zero.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise BaselineError("group_advantages needs at least one reward")
    centred = r - r.mean()
    if mode == "std":
        return centred / (r.std() + advantage_epsilon)
    if mode == "fixed":
        return centred / norm_constant
    raise BaselineError(f"unknown normalisation mode {mode!r}")


def _state_kl(policy: Policy, reference_policy: Policy, instance: TaskInstance, z_prefix: Sequence[int]) -> tuple[float, np.ndarray]:
    """KL(pi(.|s) || pi_ref(.|s)) at one state and its gradient with respect to the state's logits."""
    context = forward_context(instance)
    logits = state_logits(policy, context, z_prefix)
    log_p = log_softmax(logits)
    log_r = log_softmax(state_logits(reference_policy, context, z_prefix))
    p = softmax(logits)
    kl = float(np.dot(p, log_p - log_r))
    return kl, p * (log_p - log_r - kl)


def grpo_grad(policy: Policy, rollout_policy: Policy, reference_policy: Policy, instance: TaskInstance, group: RolloutGroup, config: BaselineConfig) -> Surrogate:
    """Clipped group-relative policy objective with an exact per-state KL penalty."""
    G = len(group)
    advantages = group_advantages(group.rewards, "std", config.advantage_epsilon)
    context = forward_context(instance)
    grad = np.zeros(policy.n_params)
    value = 0.0
    clipped = 0
    kl_total = 0.0
    for r, adv in zip(group.rationales, advantages, strict=True):
        scale = 1.0 / (G * len(r.z))
        v, c = _clipped_ratio_terms(policy, rollout_policy, instance, r.z, float(adv), config.clip_epsilon, grad, scale)
        value += v
        clipped += c
        if config.kl_beta > 0:
            for t in range(len(r.z)):
                kl, dkl = _state_kl(policy, reference_policy, instance, r.z[:t])
                kl_total += scale * kl
                add_logit_grad(policy, grad, context, r.z[:t], -config.kl_beta * scale * dkl)
    value -= config.kl_beta * kl_total
    return value, grad, {"clip_fraction": clipped / sum(len(r.z) for r in group.rationales), "kl_penalty": kl_total}


def gpg_grad(policy: Policy, instance: TaskInstance, group: RolloutGroup, config: BaselineConfig) -> Surrogate:
    """Token-length-normalised policy gradient with group-centred advantages."""
    if len(group) < 1:
        raise BaselineError("gpg needs at least one rationale")
    advantages = group_advantages(group.rewards, config.norm_mode, config.advantage_epsilon, config.norm_constant)
    context = forward_context(instance)
    total_tokens = sum(len(r.z) for r in group.rationales)
    grad = np.zeros(policy.n_params)
    value = 0.0
    for r, adv in zip(group.rationales, advantages, strict=True):
        if adv == 0.0:
            continue
        value += adv * logprob(policy, context, r.z)
        grad += adv * grad_logprob(policy, context, r.z)
    return value / total_tokens, grad / total_tokens, {}
