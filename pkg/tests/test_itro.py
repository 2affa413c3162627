import math

import numpy as np
import pytest
from conftest import NEG, deterministic_on, log_probs

from rationale_lab.baselines import filtered_sft_grad
from rationale_lab.itro import (
    ItroConfig,
    ItroError,
    Rollout,
    RolloutGroup,
    correction_factor,
    filter_valid,
    itro_step_grad,
    posterior_refinement_grad,
    raw_correction_factor,
    rollout_group,
    sample_candidates,
    sequence_log_weight,
    token_log_weights,
    train as train_itro,
)
from rationale_lab.metrics import Decode
from rationale_lab.oracle import expected_itro_grad, fd_grad, marginal
from rationale_lab.policy import Policy, forward_context, grad_logprob, init_policy, next_dist, posterior_context, sample_sequence, set_logits
from rationale_lab.tasks import TaskFamilySpec, TaskInstance, all_instances


@pytest.fixture
def adversarial(toy_task: TaskFamilySpec, toy_instance: TaskInstance) -> Policy:
    """Token 0 at the root has forward probability 0.002 and conditioned probability 0.7: raw ratio 350."""
    policy = init_policy("tabular", toy_task)
    policy = set_logits(policy, forward_context(toy_instance), (), log_probs(0.002, 0.499, 0.499))
    return set_logits(policy, posterior_context(toy_instance, policy.vocab), (), log_probs(0.7, 0.15, 0.15))


@pytest.mark.parametrize("kwargs", [{"n_candidates": 0}, {"group_size": 0}, {"clip_max": 0.0}, {"temperature": 0.0}, {"pooling": "sum"}, {"t_max": 1}])
def test_config_rejects_invalid(kwargs: dict) -> None:
    with pytest.raises(ItroError):
        ItroConfig(**kwargs)


def test_config_defaults() -> None:
    config = ItroConfig()
    assert (config.group_size, config.n_candidates, config.clip_max, config.temperature) == (4, 5, 200.0, 0.6)
    assert config.stop_grad_through_w


def test_rollout_group_on_deterministic_policy(task: TaskFamilySpec, instance: TaskInstance) -> None:
    policy = deterministic_on(init_policy("tabular", task), instance, instance.golden)
    group = rollout_group(policy, instance, ItroConfig(), np.random.default_rng(0), query_index=3)
    assert group.query_index == 3
    assert len(group) == 4
    assert all(r.z == instance.golden and r.reward == 1 and r.valid for r in group.rationales)


def test_rollout_group_on_invalid_policy(task: TaskFamilySpec, instance: TaskInstance) -> None:
    policy = deterministic_on(init_policy("tabular", task), instance, (0, 0, 0, 0))
    group = rollout_group(policy, instance, ItroConfig(), np.random.default_rng(0))
    assert group.rewards == [0.0] * 4
    assert not any(r.valid for r in group.rationales)


def test_uniform_toy_mean_reward(toy_task: TaskFamilySpec, toy_instance: TaskInstance) -> None:
    """Mean reward of the uniform V=3 toy is the exact marginal 1/9, within 3 sigma over 10^4 groups."""
    policy = init_policy("tabular", toy_task)
    config = ItroConfig(group_size=1, temperature=1.0, t_max=2)
    rng = np.random.default_rng(99)
    rewards = [rollout_group(policy, toy_instance, config, rng).rationales[0].reward for _ in range(10_000)]
    p = marginal(policy, toy_instance, 2)
    assert abs(np.mean(rewards) - p) <= 3 * math.sqrt(p * (1 - p) / 10_000)


def test_filter_valid_keeps_order_and_duplicates() -> None:
    group = RolloutGroup(
        query_index=0,
        rationales=(
            Rollout(z=(2, 3), reward=1, valid=True, answer=2),
            Rollout(z=(0, 3), reward=0, valid=True, answer=0),
            Rollout(z=(1, 1), reward=0, valid=False),
            Rollout(z=(2, 3), reward=1, valid=True, answer=2),
        ),
    )
    assert filter_valid(group, 2) == [(2, 3), (2, 3)]
    assert filter_valid(group, 1) == []


def test_candidates_include_ground_truth_once(noisy_policy: Policy, instance: TaskInstance) -> None:
    rng = np.random.default_rng(4)
    for n in (1, 2, 5, 40):
        step = sample_candidates(noisy_policy, instance, (2,), 3, n, rng)
        assert len(step.candidates) == n
        assert sum(c.is_ground_truth for c in step.candidates) == 1
        assert step.candidates[-1].is_ground_truth and step.candidates[-1].token == 3
        assert all(0 <= c.w <= 200.0 and c.forward_prob > 0 for c in step.candidates)
    assert [c.token for c in sample_candidates(noisy_policy, instance, (), 1, 1, rng).candidates] == [1]


def test_candidates_of_deterministic_policy(task: TaskFamilySpec, instance: TaskInstance) -> None:
    policy = deterministic_on(init_policy("tabular", task), instance, instance.golden)
    step = sample_candidates(policy, instance, (), instance.golden[0], 5, np.random.default_rng(0))
    assert {c.token for c in step.candidates} == {instance.golden[0]}


@pytest.mark.slow
def test_candidate_marginal_matches_next_dist(noisy_policy: Policy, instance: TaskInstance) -> None:
    """Drawn candidates (ground truth excluded) follow the forward distribution, 3 sigma per token over 10^5 draws."""
    rng = np.random.default_rng(8)
    step = sample_candidates(noisy_policy, instance, (0,), 3, 100_001, rng)
    drawn = np.array([c.token for c in step.candidates if not c.is_ground_truth])
    p = next_dist(noisy_policy, forward_context(instance), (0,))
    freq = np.bincount(drawn, minlength=4) / drawn.size
    assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / drawn.size) + 1e-12)


def test_correction_factor_is_one_for_tied_states(task: TaskFamilySpec, instance: TaskInstance) -> None:
    policy = init_policy("tabular", task, "seeded_noise", 1.0, np.random.default_rng(1), tied=True)
    for token in range(4):
        assert correction_factor(policy, instance, (1,), token, 200.0) == 1.0


def test_correction_factor_clips_at_w_max(adversarial: Policy, toy_instance: TaskInstance) -> None:
    assert raw_correction_factor(adversarial, toy_instance, (), 0) == pytest.approx(350.0)
    assert correction_factor(adversarial, toy_instance, (), 0, 200.0) == 200.0


def test_correction_factor_zero_conditioned_mass(toy_task: TaskFamilySpec, toy_instance: TaskInstance) -> None:
    policy = init_policy("tabular", toy_task)
    policy = set_logits(policy, posterior_context(toy_instance, policy.vocab), (), [NEG, 0.0, 0.0])
    assert correction_factor(policy, toy_instance, (), 0, 200.0) == 0.0


def test_correction_factor_unsampleable(toy_task: TaskFamilySpec, toy_instance: TaskInstance) -> None:
    policy = set_logits(init_policy("tabular", toy_task), forward_context(toy_instance), (), [NEG, 0.0, 0.0])
    with pytest.raises(ItroError, match="unsampleable candidate"):
        correction_factor(policy, toy_instance, (), 0, 200.0)


def test_clip_statistics_match_hand_count(adversarial: Policy, toy_instance: TaskInstance) -> None:
    """Every candidate for token 0 at the root has raw ratio 350 and is recorded as exactly 200."""
    config = ItroConfig(n_candidates=40, t_max=2)
    _, _, stats = itro_step_grad(adversarial, toy_instance, [(0, 2)], config, np.random.default_rng(17))
    candidates = [c for s in stats.steps for c in s.candidates]
    root = next(s for s in stats.steps if s.position == 0)
    clipped = [c for c in root.candidates if c.token == 0]
    assert all(c.w == 200.0 for c in clipped)
    assert all(c.w <= 200.0 for c in candidates)
    hand_count = sum(c.raw_ratio > 200.0 for c in candidates)
    assert hand_count == len(clipped) >= 1
    assert stats.clip_fraction == hand_count / len(candidates)
    assert stats.n_candidates == len(candidates) == 80


def test_no_valid_rationales(noisy_policy: Policy, instance: TaskInstance) -> None:
    with pytest.raises(ItroError, match="no valid rationales"):
        itro_step_grad(noisy_policy, instance, [], ItroConfig(), np.random.default_rng(0))


def test_single_candidate_with_tied_states_is_filtered_sft(task: TaskFamilySpec, instance: TaskInstance) -> None:
    """n=1 and conditioned == forward: every weight is 1 and only the rationale's own tokens remain."""
    policy = init_policy("tabular", task, "seeded_noise", 1.0, np.random.default_rng(2), tied=True)
    rationales = [(2, 3), (0, 2, 3), (2, 3)]
    value, grad, stats = itro_step_grad(policy, instance, rationales, ItroConfig(n_candidates=1), np.random.default_rng(0))
    sft_value, sft_grad, _ = filtered_sft_grad(policy, instance, rationales)
    assert np.max(np.abs(grad - sft_grad)) <= 1e-12
    assert value == pytest.approx(sft_value, abs=1e-12)
    assert stats.mean_w == 1.0
    assert stats.clip_fraction == 0.0


def test_pooling_modes_agree_on_one_rationale(noisy_policy: Policy, instance: TaskInstance) -> None:
    mean = itro_step_grad(noisy_policy, instance, [(1, 2, 3)], ItroConfig(pooling="mean"), np.random.default_rng(3))
    pool = itro_step_grad(noisy_policy, instance, [(1, 2, 3)], ItroConfig(pooling="pool"), np.random.default_rng(3))
    np.testing.assert_array_equal(mean[1], pool[1])


def test_pooling_weights_by_length(noisy_policy: Policy, instance: TaskInstance) -> None:
    """``pool`` normalises by the total token count, ``mean`` per rationale."""
    config = ItroConfig(n_candidates=1, pooling="pool")
    _, grad, _ = itro_step_grad(noisy_policy, instance, [(2, 3), (0, 2, 3)], config, np.random.default_rng(0))
    expected = expected_itro_grad(noisy_policy, instance, [(2, 3)], 1, 200.0) * 2 / 5 + expected_itro_grad(noisy_policy, instance, [(0, 2, 3)], 1, 200.0) * 3 / 5
    np.testing.assert_allclose(grad, expected, atol=1e-12)


def test_gradient_through_weights_matches_finite_differences(toy_task: TaskFamilySpec, toy_instance: TaskInstance) -> None:
    """With ``stop_grad_through_w`` off the gradient is that of the full sum of w * log p for fixed candidates."""
    policy = init_policy("tabular", toy_task, "seeded_noise", 0.5, np.random.default_rng(6))
    config = ItroConfig(n_candidates=3, t_max=2, stop_grad_through_w=False)

    def objective(p: Policy) -> float:
        return itro_step_grad(p, toy_instance, [(1, 2)], config, np.random.default_rng(21))[0]

    _, grad, _ = itro_step_grad(policy, toy_instance, [(1, 2)], config, np.random.default_rng(21))
    indices = np.flatnonzero(grad).tolist()
    fd = fd_grad(objective, policy, indices=indices)
    np.testing.assert_allclose(grad[indices], fd[indices], rtol=1e-5, atol=1e-8)


def test_stop_gradient_leaves_conditioned_states_alone(noisy_policy: Policy, instance: TaskInstance) -> None:
    _, grad, _ = itro_step_grad(noisy_policy, instance, [(2, 3)], ItroConfig(), np.random.default_rng(0))
    cond_only = grad_logprob(noisy_policy, posterior_context(instance, noisy_policy.vocab), (2, 3)) != 0
    assert np.all(grad[cond_only] == 0.0)


def test_posterior_refinement_grad(noisy_policy: Policy, instance: TaskInstance) -> None:
    cond = posterior_context(instance, noisy_policy.vocab)
    expected = (grad_logprob(noisy_policy, cond, (2, 3)) / 2 + grad_logprob(noisy_policy, cond, (1, 1, 3)) / 3) / 2
    np.testing.assert_allclose(posterior_refinement_grad(noisy_policy, instance, [(2, 3), (1, 1, 3)]), expected, atol=1e-15)


def test_importance_weight_factorises(task: TaskFamilySpec) -> None:
    """Sequence log-weight equals the sum of token log-weights over 100 random (policy, rationale) pairs."""
    instances = all_instances(task)
    for i in range(100):
        rng = np.random.default_rng([5, i])
        policy = init_policy("tabular", task, "seeded_noise", 1.0, rng)
        inst = instances[i % len(instances)]
        z = sample_sequence(policy, forward_context(inst), 1.0, 4, rng)
        assert abs(sequence_log_weight(policy, inst, z) - math.fsum(token_log_weights(policy, inst, z))) <= 1e-9


@pytest.mark.slow
def test_stochastic_gradient_is_consistent_with_enumeration(toy_task: TaskFamilySpec, toy_instance: TaskInstance) -> None:
    """The mean of 10^5 seeded ITRO gradients is within 5% (relative l2) of the exact expectation."""
    policy = init_policy("tabular", toy_task, "seeded_noise", 1.0, np.random.default_rng(31))
    config = ItroConfig(n_candidates=5, t_max=2)
    rationales = [(1, 2)]
    total = np.zeros(policy.n_params)
    for i in range(100_000):
        total += itro_step_grad(policy, toy_instance, rationales, config, np.random.default_rng([31, i]))[1]
    exact = expected_itro_grad(policy, toy_instance, rationales, 5, 200.0)
    assert np.linalg.norm(total / 100_000 - exact) <= 0.05 * np.linalg.norm(exact)


def test_train_shortcut_runs_itro(task: TaskFamilySpec) -> None:
    report = train_itro(ItroConfig(), task, 3, steps=2, batch_size=2, eval=Decode(k=2))
    assert [r.method for r in report.records] == ["itro", "itro"]
    assert report.records[-1].accuracy is not None
