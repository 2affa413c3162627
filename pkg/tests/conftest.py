import math
import sys
from pathlib import Path

import numpy as np
import pytest

root = Path(__file__).resolve().parents[1]
if str(root) not in sys.path:
    sys.path.insert(0, str(root))

from rationale_lab.policy import Policy, forward_context, init_policy, posterior_context, set_logits
from rationale_lab.tasks import TaskFamilySpec, TaskInstance, instance_from_digits

# a logit this low underflows to exactly zero probability
NEG = -1000.0


@pytest.fixture
def task() -> TaskFamilySpec:
    """sum_chain with B=3, L=2, T_max=4."""
    return TaskFamilySpec(base=3, chain_length=2, max_rationale_len=4)


@pytest.fixture
def toy_task() -> TaskFamilySpec:
    """
    Smallest family: one digit, B=2, T_max=2.
    The policy alphabet is {0, 1, EOS}, so a uniform policy is the V=3 toy.
    """
    return TaskFamilySpec(base=2, chain_length=1, max_rationale_len=2)


@pytest.fixture
def toy_instance(toy_task: TaskFamilySpec) -> TaskInstance:
    """Query ``1 =`` with answer 1; the only valid rationale is ``[1, EOS]``."""
    return instance_from_digits(toy_task, [1])


@pytest.fixture
def instance(task: TaskFamilySpec) -> TaskInstance:
    """Query ``1 + 1 =`` with answer 2."""
    return instance_from_digits(task, [1, 1])


@pytest.fixture
def noisy_policy(task: TaskFamilySpec) -> Policy:
    return init_policy("tabular", task, "seeded_noise", 1.0, np.random.default_rng(11))


@pytest.fixture
def linear_policy(task: TaskFamilySpec) -> Policy:
    return init_policy("linear", task, "seeded_noise", 0.5, np.random.default_rng(12), context_window=3)


def log_probs(*probs: float) -> list[float]:
    """Logits reproducing ``probs``; zero probabilities map to an underflowing logit."""
    return [math.log(p) if p > 0 else NEG for p in probs]


def deterministic_on(policy: Policy, instance: TaskInstance, z: tuple[int, ...], conditioned: bool = False) -> Policy:
    """Put all forward (or conditioned) mass of ``instance`` on rationale ``z``."""
    context = posterior_context(instance, policy.vocab) if conditioned else forward_context(instance)
    for t, token in enumerate(z):
        logits = [NEG] * policy.vocab_size
        logits[token] = 0.0
        policy = set_logits(policy, context, z[:t], logits)
    return policy
