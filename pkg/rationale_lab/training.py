"""Step loop shared by ITRO and the comparison methods.

Every step snapshots ``theta_old``, regenerates its batch of instances from
``(seed, (step - 1) * batch_size + q)``, rolls out one group per query with a generator
seeded from ``(seed, 1, step, q)``, computes the method's per-query surrogate
gradient, reduces the gradients in query order and applies ``theta += lr * grad``.
Because every query owns its generator and the reduction order is fixed, the
metrics stream does not depend on the worker count.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from tqdm import tqdm

from rationale_lab.baselines import BaselineError, gpg_grad, grpo_grad, latro_grad, raftpp_grad, sft_grad
from rationale_lab.checkpoints import load_checkpoint
from rationale_lab.config import RunConfig
from rationale_lab.itro import ItroError, RolloutGroup, filter_valid, itro_step_grad, posterior_refinement_grad, rollout_group
from rationale_lab.metrics import MetricsRecord, eval_accuracy, mean_rationale_length
from rationale_lab.policy import Policy, build_policy, with_params
from rationale_lab.tasks import TaskInstance, all_instances, instance_at, sample_instance

logger = logging.getLogger(__name__)

# stream ids mixed into the run seed
_INIT_STREAM = 5
_ROLLOUT_STREAM = 1
_LENGTH_STREAM = 2
_DECODE_STREAM = 3
_EVAL_SET_STREAM = 4


@dataclass(frozen=True)
class QueryUpdate:
    query_index: int
    group: RolloutGroup
    objective: float = 0.0
    grad: np.ndarray | None = None
    stats: dict[str, float] = field(default_factory=dict)
    skip_reason: str | None = None


@dataclass
class TrainingReport:
    policy: Policy
    initial_policy: Policy
    records: list[MetricsRecord]
    initial_accuracy: float
    final_accuracy: float
    initial_correct_len: float
    final_correct_len: float
    skipped_steps: int = 0


def eval_instances(config: RunConfig) -> list[TaskInstance]:
    """Exhaustive query set when it fits in ``eval_size``, otherwise a seeded sample of that size."""
    if config.task.n_queries <= config.eval_size:
        return all_instances(config.task)
    return [sample_instance(config.task, np.random.default_rng([config.seed, _EVAL_SET_STREAM, i])) for i in range(config.eval_size)]


def initial_policy(config: RunConfig) -> Policy:
    return build_policy(config.policy, config.task, np.random.default_rng([config.seed, _INIT_STREAM]))


def reference_policy(config: RunConfig, start: Policy) -> Policy:
    """Frozen KL anchor for latro/grpo: the configured checkpoint, or the initial policy."""
    if config.baseline.reference_checkpoint is None:
        return start
    return load_checkpoint(config.baseline.reference_checkpoint, expected=config.policy, task=config.task)


def _query_update(
    config: RunConfig,
    policy: Policy,
    reference: Policy,
    instance: TaskInstance,
    rng: np.random.Generator,
    query_index: int,
) -> QueryUpdate:
    group = rollout_group(policy, instance, config.itro, rng, query_index)
    try:
        if config.method == "itro":
            valid = filter_valid(group, instance.y)
            value, grad, st = itro_step_grad(policy, instance, valid, config.itro, rng)
            if config.itro.posterior_sft_coef > 0:
                grad = grad + config.itro.posterior_sft_coef * posterior_refinement_grad(policy, instance, valid)
            stats = {"mean_w": st.mean_w, "clip_fraction": st.clip_fraction, "n_candidates": float(st.n_candidates), "n_clipped": float(sum(c.raw_ratio > config.itro.clip_max for s in st.steps for c in s.candidates))}
        elif config.method == "sft":
            value, grad, stats = sft_grad(policy, instance)
        elif config.method == "latro":
            value, grad, stats = latro_grad(policy, instance, group, config.baseline, reference)
        elif config.method == "raftpp":
            # theta_old == theta within a step, so ratios start at 1
            value, grad, stats = raftpp_grad(policy, policy, instance, group, config.baseline)
        elif config.method == "grpo":
            value, grad, stats = grpo_grad(policy, policy, reference, instance, group, config.baseline)
        else:
            value, grad, stats = gpg_grad(policy, instance, group, config.baseline)
    except (ItroError, BaselineError) as exc:
        return QueryUpdate(query_index=query_index, group=group, skip_reason=str(exc))
    return QueryUpdate(query_index=query_index, group=group, objective=value, grad=grad, stats=stats)


def _reduce(step: int, config: RunConfig, updates: list[QueryUpdate], policy: Policy) -> tuple[np.ndarray | None, MetricsRecord]:
    rollouts = [r for u in updates for r in u.group.rationales]
    applied = [u for u in updates if u.skip_reason is None]
    base = {
        "step": step,
        "method": config.method,
        "mean_reward": float(np.mean([r.reward for r in rollouts])),
        "valid_fraction": float(np.mean([r.valid for r in rollouts])),
        "mean_rationale_len": float(np.mean([len(r.z) for r in rollouts])),
        "n_skipped_queries": len(updates) - len(applied),
    }
    if not applied:
        return None, MetricsRecord(skipped=True, **base)

    grad = np.zeros(policy.n_params)
    for u in applied:
        grad += u.grad
    grad /= len(applied)
    extra: dict[str, Any] = {}
    if config.method == "itro":
        n_candidates = sum(u.stats["n_candidates"] for u in applied)
        extra["mean_w"] = float(sum(u.stats["mean_w"] * u.stats["n_candidates"] for u in applied) / n_candidates)
        extra["clip_fraction"] = float(sum(u.stats["n_clipped"] for u in applied) / n_candidates)
    if config.method in ("raftpp", "grpo"):
        extra["clip_fraction"] = float(np.mean([u.stats["clip_fraction"] for u in applied]))
    if config.method in ("latro", "grpo"):
        extra["kl_penalty"] = float(np.mean([u.stats["kl_penalty"] for u in applied]))
    objective = float(np.mean([u.objective for u in applied]))
    return grad, MetricsRecord(objective_value=objective, **base, **extra)


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None


def evaluate_policy(config: RunConfig, policy: Policy, instances: list[TaskInstance], step: int) -> tuple[float, float]:
    """Accuracy under the configured decode and the mean length of correct sampled rationales."""
    decode_rng = np.random.default_rng([config.seed, _DECODE_STREAM, step])
    accuracy = eval_accuracy(policy, instances, config.eval, decode_rng)
    length_rng = np.random.default_rng([config.seed, _LENGTH_STREAM, step])
    correct_len = mean_rationale_length(policy, instances, config.eval.k, config.eval.temperature, length_rng, correct_only=True)
    return accuracy, correct_len


def train(
    config: RunConfig,
    on_record: Callable[[MetricsRecord, Policy], None] | None = None,
    progress: bool = False,
) -> TrainingReport:
    """Run ``config.steps`` updates of ``config.method``.

    Args:
        config: Validated run configuration.
        on_record: Called after every step with the step's record and the updated
            policy; records of evaluation steps carry ``accuracy``.
        progress: Show a tqdm progress bar.

    Returns:
        The final policy and the full metrics stream.
    """
    if config.method == "latro" and config.itro.group_size < 2:
        raise BaselineError("latro needs rollout.G >= 2 for the leave-one-out baseline")
    start = initial_policy(config)
    reference = reference_policy(config, start)
    instances = eval_instances(config)
    initial_accuracy, initial_len = evaluate_policy(config, start, instances, 0)
    logger.info("%s: initial accuracy %.4f on %d eval queries", config.method, initial_accuracy, len(instances))

    policy = start
    records: list[MetricsRecord] = []
    skipped_steps = 0
    accuracy, correct_len = initial_accuracy, initial_len
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        steps: Iterable[int] = tqdm(range(1, config.steps + 1), desc=f"train[{config.method}]", disable=not progress)
        for step in steps:
            started = time.perf_counter()
            snapshot = policy

            def work(q: int, snapshot: Policy = snapshot, step: int = step) -> QueryUpdate:
                instance = instance_at(config.task, config.seed, (step - 1) * config.batch_size + q)
                rng = np.random.default_rng([config.seed, _ROLLOUT_STREAM, step, q])
                return _query_update(config, snapshot, reference, instance, rng, q)

            queries = range(config.batch_size)
            updates = list(pool.map(work, queries)) if pool is not None else [work(q) for q in queries]
            grad, record = _reduce(step, config, updates, snapshot)
            if grad is None:
                skipped_steps += 1
                logger.warning("step %d skipped: no query produced an update (%s)", step, updates[0].skip_reason)
            elif config.itro.learning_rate != 0.0:
                policy = with_params(snapshot, snapshot.params + config.itro.learning_rate * grad)

            if step % config.eval_every == 0 or step == config.steps:
                accuracy, correct_len = evaluate_policy(config, policy, instances, step)
                record = replace(record, accuracy=accuracy, mean_correct_len=_finite_or_none(correct_len))
                logger.info("step %d: accuracy %.4f, mean reward %.4f", step, accuracy, record.mean_reward)
            record = replace(record, wall_ms=(time.perf_counter() - started) * 1000.0)
            records.append(record)
            if on_record is not None:
                on_record(record, policy)
    finally:
        if pool is not None:
            pool.shutdown()

    return TrainingReport(
        policy=policy,
        initial_policy=start,
        records=records,
        initial_accuracy=initial_accuracy,
        final_accuracy=accuracy,
        initial_correct_len=initial_len,
        final_correct_len=correct_len,
        skipped_steps=skipped_steps,
    )
