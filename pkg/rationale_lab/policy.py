"""Autoregressive next-token policies with exact log-probabilities and analytic gradients.

Two parameterizations are supported:

* ``tabular``: one logit vector per enumerated state, where a state is the full
  (context, rationale prefix) pair. Answer-conditioned states get their own logits
  unless the policy is built ``tied``.
* ``linear``: a softmax over a weight matrix applied to a one-hot encoding of the
  last ``k`` tokens plus a bias feature. Forward and answer-conditioned contexts
  share the weights.

Policies are immutable values; updates go through :func:`with_params`.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np
from scipy.special import log_softmax, softmax

from rationale_lab.tasks import TaskFamilySpec, TaskInstance, Vocabulary, all_instances

logger = logging.getLogger(__name__)

ARCHS = ("tabular", "linear")
INITS = ("uniform", "seeded_noise")


class PolicyError(ValueError):
    """Raised for invalid policy construction or unaddressable states."""


@dataclass(frozen=True)
class Context:
    prefix: tuple[int, ...]
    conditioned: bool = False


def forward_context(instance: TaskInstance) -> Context:
    return Context(prefix=instance.x, conditioned=False)


def posterior_context(instance: TaskInstance, vocab: Vocabulary) -> Context:
    """The answer-conditioned context ``x ++ [ANS, y, SEP]``."""
    return Context(prefix=(*instance.x, vocab.ans, instance.y, vocab.sep), conditioned=True)


def answer_state(instance: TaskInstance, z: Sequence[int], vocab: Vocabulary) -> tuple[Context, tuple[int, ...]]:
    """Context and prefix addressing the answer slot after rationale ``z``."""
    return forward_context(instance), (*z, vocab.ans)


@dataclass(frozen=True)
class PolicySpec:
    arch: str = "tabular"
    init: str = "seeded_noise"
    noise_scale: float = 0.01
    context_window: int = 4
    tied: bool = False

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise PolicyError(f"unknown policy arch {self.arch!r}")
        if self.init not in INITS:
            raise PolicyError(f"unknown policy init {self.init!r}")
        if self.noise_scale < 0:
            raise PolicyError(f"noise scale must be >= 0, got {self.noise_scale}")
        if self.context_window < 1:
            raise PolicyError(f"context_window must be >= 1, got {self.context_window}")


@dataclass(frozen=True, eq=False)
class Policy:
    arch: str
    task: TaskFamilySpec
    params: np.ndarray
    context_window: int = 4
    tied: bool = False
    state_index: Mapping[tuple[int, ...], int] = field(default_factory=dict, repr=False)

    @property
    def vocab(self) -> Vocabulary:
        return self.task.vocab

    @property
    def vocab_size(self) -> int:
        return self.vocab.output_size

    @property
    def n_params(self) -> int:
        return int(self.params.size)

    @property
    def feature_dim(self) -> int:
        return self.context_window * (self.vocab.size + 1) + 1


def _digit_prefixes(base: int, max_len: int) -> list[tuple[int, ...]]:
    prefixes: list[tuple[int, ...]] = []
    for length in range(max_len + 1):
        prefixes.extend(product(range(base), repeat=length))
    return prefixes


def tabular_state_index(task: TaskFamilySpec, tied: bool = False) -> dict[tuple[int, ...], int]:
    """Enumerate every addressable tabular state.

    States cover the forward context of every query, the answer-conditioned context of
    every (query, answer) pair and the answer slot ``x ++ z ++ [ANS]`` after every
    complete or truncated rationale.
    """
    vocab = task.vocab
    t_max = task.max_rationale_len
    prefixes = _digit_prefixes(task.base, t_max - 1)
    queries = [inst.x for inst in all_instances(task)]
    index: dict[tuple[int, ...], int] = {}
    for x in queries:
        for zp in prefixes:
            index[x + zp] = len(index)
    for x in queries:
        for y in range(task.base):
            cond = (*x, vocab.ans, y, vocab.sep)
            for zp in prefixes:
                index[cond + zp] = index[x + zp] if tied else len(index)
    outcomes = [(*zp, vocab.eos) for zp in prefixes]
    outcomes.extend(product(range(task.base), repeat=t_max))
    for x in queries:
        for z in outcomes:
            index[(*x, *z, vocab.ans)] = len(index)
    return index


def _n_params(arch: str, task: TaskFamilySpec, context_window: int, state_index: Mapping[tuple[int, ...], int]) -> int:
    vocab = task.vocab
    if arch == "tabular":
        return (max(state_index.values()) + 1) * vocab.output_size
    return vocab.output_size * (context_window * (vocab.size + 1) + 1)


def init_policy(
    arch: str,
    spec: TaskFamilySpec,
    init: str = "uniform",
    noise_scale: float = 0.0,
    rng: np.random.Generator | None = None,
    context_window: int = 4,
    tied: bool = False,
) -> Policy:
    """Build a policy for a task family.

    Args:
        arch: ``tabular`` or ``linear``.
        spec: Task family whose vocabulary and rationale space the policy covers.
        init: ``uniform`` (all logits zero) or ``seeded_noise`` (i.i.d. normal noise
            of scale ``noise_scale`` on every logit).
        noise_scale: Standard deviation of the initial logit noise.
        rng: Generator for ``seeded_noise``.
        context_window: Window ``k`` of the linear architecture.
        tied: Tabular only; answer-conditioned states reuse the forward logits.

    Returns:
        A new immutable policy.
    """
    PolicySpec(arch=arch, init=init, noise_scale=noise_scale, context_window=context_window, tied=tied)
    state_index = tabular_state_index(spec, tied) if arch == "tabular" else {}
    params = np.zeros(_n_params(arch, spec, context_window, state_index))
    if init == "seeded_noise" and noise_scale > 0:
        if rng is None:
            raise PolicyError("seeded_noise init requires a generator")
        params = rng.normal(0.0, noise_scale, size=params.size)
    params.setflags(write=False)
    logger.debug("initialised %s policy with %d parameters", arch, params.size)
    return Policy(arch=arch, task=spec, params=params, context_window=context_window, tied=tied, state_index=state_index)


def build_policy(spec: PolicySpec, task: TaskFamilySpec, rng: np.random.Generator) -> Policy:
    return init_policy(spec.arch, task, init=spec.init, noise_scale=spec.noise_scale, rng=rng, context_window=spec.context_window, tied=spec.tied)


def with_params(policy: Policy, params: np.ndarray) -> Policy:
    params = np.array(params, dtype=float)
    if params.shape != policy.params.shape:
        raise PolicyError(f"parameter shape {params.shape} does not match {policy.params.shape}")
    params.setflags(write=False)
    return replace(policy, params=params)


def _features(policy: Policy, tokens: tuple[int, ...]) -> np.ndarray:
    k = policy.context_window
    width = policy.vocab.size + 1
    window = tokens[-k:]
    padded = (policy.vocab.size,) * (k - len(window)) + window
    active = [slot * width + token for slot, token in enumerate(padded)]
    active.append(k * width)
    return np.asarray(active)


def _state_id(policy: Policy, tokens: tuple[int, ...]) -> int:
    try:
        return policy.state_index[tokens]
    except KeyError:
        raise PolicyError(f"unaddressable state {policy.vocab.render(tokens)!r}") from None


def state_logits(policy: Policy, context: Context, z_prefix: Sequence[int]) -> np.ndarray:
    tokens = (*context.prefix, *z_prefix)
    V = policy.vocab_size
    if policy.arch == "tabular":
        s = _state_id(policy, tokens)
        return policy.params[s * V : (s + 1) * V]
    weights = policy.params.reshape(V, policy.feature_dim)
    return weights[:, _features(policy, tokens)].sum(axis=1)


def add_logit_grad(policy: Policy, grad: np.ndarray, context: Context, z_prefix: Sequence[int], dlogits: np.ndarray) -> None:
    """Accumulate a gradient with respect to one state's logits into ``grad`` in place."""
    tokens = (*context.prefix, *z_prefix)
    V = policy.vocab_size
    if policy.arch == "tabular":
        s = _state_id(policy, tokens)
        grad[s * V : (s + 1) * V] += dlogits
        return
    weights = grad.reshape(V, policy.feature_dim)
    weights[:, _features(policy, tokens)] += dlogits[:, None]


def next_dist(policy: Policy, context: Context, z_prefix: Sequence[int]) -> np.ndarray:
    return softmax(state_logits(policy, context, z_prefix))


def logprob(policy: Policy, context: Context, z: Sequence[int]) -> float:
    if len(z) == 0:
        raise PolicyError("logprob of an empty sequence")
    return float(sum(log_softmax(state_logits(policy, context, z[:t]))[z[t]] for t in range(len(z))))


def score_vector(probs: np.ndarray, token: int) -> np.ndarray:
    """Gradient of ``log softmax(logits)[token]`` with respect to the logits."""
    out = -probs
    out[token] += 1.0
    return out


def grad_logprob(policy: Policy, context: Context, z: Sequence[int]) -> np.ndarray:
    if len(z) == 0:
        raise PolicyError("gradient of an empty sequence")
    grad = np.zeros(policy.n_params)
    for t in range(len(z)):
        add_logit_grad(policy, grad, context, z[:t], score_vector(next_dist(policy, context, z[:t]), z[t]))
    return grad


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), probs.size - 1))


def sample_sequence(policy: Policy, context: Context, temperature: float, max_len: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Ancestral sampling with logits divided by ``temperature``; stops at EOS or ``max_len``."""
    if temperature <= 0:
        raise PolicyError(f"temperature must be > 0, got {temperature}")
    z: list[int] = []
    while len(z) < max_len:
        token = _draw(softmax(state_logits(policy, context, z) / temperature), rng)
        z.append(token)
        if token == policy.vocab.eos:
            break
    return tuple(z)


def greedy_sequence(policy: Policy, context: Context, max_len: int) -> tuple[int, ...]:
    """Zero-temperature decoding; ties go to the lowest token id."""
    z: list[int] = []
    while len(z) < max_len:
        token = int(np.argmax(state_logits(policy, context, z)))
        z.append(token)
        if token == policy.vocab.eos:
            break
    return tuple(z)


def sample_token(policy: Policy, context: Context, z_prefix: Sequence[int], rng: np.random.Generator, size: int) -> list[int]:
    probs = next_dist(policy, context, z_prefix)
    return [_draw(probs, rng) for _ in range(size)]


def set_logits(policy: Policy, context: Context, z_prefix: Sequence[int], logits: Sequence[float]) -> Policy:
    """Return a tabular policy whose state ``(context, z_prefix)`` has the given logits."""
    if policy.arch != "tabular":
        raise PolicyError("set_logits addresses individual states and needs a tabular policy")
    V = policy.vocab_size
    s = _state_id(policy, (*context.prefix, *z_prefix))
    params = np.array(policy.params)
    params[s * V : (s + 1) * V] = logits
    return with_params(policy, params)
