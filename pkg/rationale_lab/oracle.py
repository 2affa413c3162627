"""Exact brute-force oracles over the enumerable rationale space.

Everything here is computed by walking the full outcome tree of a policy, so it is
the ground truth the stochastic estimators in :mod:`rationale_lab.itro` and
:mod:`rationale_lab.baselines` are checked against.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from rationale_lab.policy import Context, Policy, add_logit_grad, forward_context, grad_logprob, next_dist, posterior_context, score_vector, state_logits, with_params
from rationale_lab.tasks import MAX_ENUMERABLE, TaskInstance, answer_of

logger = logging.getLogger(__name__)

# exp() of anything below this underflows to 0.0 in float64
LOG_UNDERFLOW = -745.0


class OracleError(ValueError):
    """Raised when an exact computation is undefined or out of bounds."""


@dataclass(frozen=True)
class RationaleEntry:
    z: tuple[int, ...]
    log_prob: float
    prob: float
    complete: bool
    answer: int | None

    @property
    def valid(self) -> bool:
        return self.answer is not None


@dataclass(frozen=True)
class RationaleSet:
    entries: tuple[RationaleEntry, ...]
    underflow_count: int = 0

    @property
    def total_mass(self) -> float:
        return math.fsum(e.prob for e in self.entries)

    def __iter__(self) -> Iterator[RationaleEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def _walk(policy: Policy, context: Context, prefix: tuple[int, ...], log_p: float, t_max: int, out: list[tuple[tuple[int, ...], float, bool]]) -> None:
    log_probs = log_softmax(state_logits(policy, context, prefix))
    eos = policy.vocab.eos
    for token in range(policy.vocab_size):
        z = (*prefix, token)
        lp = log_p + float(log_probs[token])
        if token == eos:
            out.append((z, lp, True))
        elif len(z) == t_max:
            out.append((z, lp, False))
        else:
            _walk(policy, context, z, lp, t_max, out)


def enumerate_rationales(policy: Policy, context: Context, t_max: int, workers: int = 1) -> RationaleSet:
    """Enumerate every outcome of length <= ``t_max`` with its exact probability.

    Outcomes are sequences ending at their first EOS (complete) or ``t_max`` tokens
    without EOS (truncated). Entries come out in lexicographic token order; with
    ``workers > 1`` the tree is split by first token and merged in that order, so the
    result does not depend on the worker count.
    """
    if policy.vocab_size**t_max > MAX_ENUMERABLE:
        raise OracleError(f"rationale space {policy.vocab_size}^{t_max} exceeds the enumeration bound {MAX_ENUMERABLE}")
    root = log_softmax(state_logits(policy, context, ()))
    eos = policy.vocab.eos

    def branch(token: int) -> list[tuple[tuple[int, ...], float, bool]]:
        out: list[tuple[tuple[int, ...], float, bool]] = []
        lp = float(root[token])
        if token == eos:
            out.append(((token,), lp, True))
        elif t_max == 1:
            out.append(((token,), lp, False))
        else:
            _walk(policy, context, (token,), lp, t_max, out)
        return out

    tokens = range(policy.vocab_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            branches = list(pool.map(branch, tokens))
    else:
        branches = [branch(token) for token in tokens]

    entries = []
    underflow = 0
    for z, lp, complete in (item for b in branches for item in b):
        if lp < LOG_UNDERFLOW:
            underflow += 1
            prob = 0.0
        else:
            prob = math.exp(lp)
        entries.append(RationaleEntry(z=z, log_prob=lp, prob=prob, complete=complete, answer=answer_of(z, policy.vocab, t_max)))
    if underflow:
        logger.info("enumeration treated %d outcomes as zero mass (underflow)", underflow)
    return RationaleSet(entries=tuple(entries), underflow_count=underflow)


def _valid_entries(policy: Policy, instance: TaskInstance, t_max: int) -> list[RationaleEntry]:
    rationales = enumerate_rationales(policy, forward_context(instance), t_max)
    return [e for e in rationales if e.answer == instance.y]


def marginal(policy: Policy, instance: TaskInstance, t_max: int) -> float:
    """``pi(y|x)``: the total forward mass of rationales whose answer is ``y``."""
    return math.fsum(e.prob for e in _valid_entries(policy, instance, t_max))


def true_posterior(policy: Policy, instance: TaskInstance, t_max: int) -> dict[tuple[int, ...], float]:
    """Bayes posterior ``pi(z|x,y)`` over the valid set; zero mass elsewhere is omitted."""
    valid = _valid_entries(policy, instance, t_max)
    total = math.fsum(e.prob for e in valid)
    if total <= 0:
        raise OracleError("answer unreachable")
    return {e.z: e.prob / total for e in valid}


def mll_grad_exact(policy: Policy, instance: TaskInstance, t_max: int) -> np.ndarray:
    """Gradient of ``log pi(y|x)`` as the sum of ``grad pi(z|x)`` over the valid set divided by ``pi(y|x)``."""
    valid = _valid_entries(policy, instance, t_max)
    total = math.fsum(e.prob for e in valid)
    if total <= 0:
        raise OracleError("answer unreachable")
    context = forward_context(instance)
    grad_mass = np.zeros(policy.n_params)
    for e in valid:
        grad_mass += e.prob * grad_logprob(policy, context, e.z)
    return grad_mass / total


def posterior_grad_expect(
    policy: Policy,
    instance: TaskInstance,
    t_max: int,
    posterior: Mapping[tuple[int, ...], float] | None = None,
) -> np.ndarray:
    """Expectation of ``grad log pi(z|x)`` under the posterior.

    ``posterior`` overrides the weights; it need not be normalised, which makes the
    expectation's linearity in the weights directly testable.
    """
    weights = true_posterior(policy, instance, t_max) if posterior is None else posterior
    context = forward_context(instance)
    grad = np.zeros(policy.n_params)
    for z, weight in weights.items():
        if weight:
            grad += weight * grad_logprob(policy, context, z)
    return grad


def conditioned_distribution(policy: Policy, instance: TaskInstance, t_max: int) -> tuple[dict[tuple[int, ...], float], float]:
    """Answer-conditioned sequence distribution restricted to complete sequences of length <= ``t_max``.

    Returns:
        The renormalised distribution and the mass it retained before renormalising.
    """
    rationales = enumerate_rationales(policy, posterior_context(instance, policy.vocab), t_max)
    complete = [e for e in rationales if e.complete]
    retained = math.fsum(e.prob for e in complete)
    if retained <= 0:
        raise OracleError("conditioned policy places no mass on complete sequences")
    return {e.z: e.prob / retained for e in complete}, retained


def kl_true_vs_estimated(policy: Policy, instance: TaskInstance, t_max: int) -> float:
    """``KL(pi(z|x,y) || pi(z|x+y))`` with the conditioned side renormalised over length <= ``t_max``."""
    p = true_posterior(policy, instance, t_max)
    q, retained = conditioned_distribution(policy, instance, t_max)
    if retained < 1.0:
        logger.debug("conditioned distribution renormalised from mass %.6g", retained)
    terms = []
    for z, pz in p.items():
        if pz == 0:
            continue
        qz = q.get(z, 0.0)
        if qz <= 0:
            raise OracleError(f"absolute-continuity violated at {policy.vocab.render(z)!r}")
        terms.append(pz * (math.log(pz) - math.log(qz)))
    return max(math.fsum(terms), 0.0)


def fd_grad(loss_fn: Callable[[Policy], float], policy: Policy, h: float = 1e-6, indices: Sequence[int] | None = None) -> np.ndarray:
    """Central finite differences ``(f(theta + h e_i) - f(theta - h e_i)) / 2h``.

    Only the coordinates in ``indices`` are perturbed when given; the rest stay zero.
    """
    if h <= 0:
        raise OracleError(f"step size must be > 0, got {h}")
    theta = np.array(policy.params, dtype=float)
    grad = np.zeros_like(theta)
    coords = range(theta.size) if indices is None else indices
    for i in coords:
        bumped = theta.copy()
        bumped[i] = theta[i] + h
        f_plus = loss_fn(with_params(policy, bumped))
        bumped[i] = theta[i] - h
        f_minus = loss_fn(with_params(policy, bumped))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise OracleError(f"non-finite loss at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2 * h)
    return grad


def expected_itro_grad(
    policy: Policy,
    instance: TaskInstance,
    rationales: Sequence[Sequence[int]],
    n: int,
    clip_max: float,
) -> np.ndarray:
    """Exact expectation of the stochastic ITRO gradient over candidate sampling.

    Candidates at each position are the ground-truth token plus ``n - 1`` i.i.d. draws
    from the forward policy, so the expectation sums the draw term over the whole
    token alphabet instead of sampling it. Rationales are averaged with equal weight.
    """
    fwd = forward_context(instance)
    cond = posterior_context(instance, policy.vocab)
    total = np.zeros(policy.n_params)
    for z in rationales:
        grad = np.zeros(policy.n_params)
        scale = 1.0 / (len(z) * n)
        for t in range(len(z)):
            p = next_dist(policy, fwd, z[:t])
            q = next_dist(policy, cond, z[:t])
            w = np.minimum(np.divide(q, p, out=np.zeros_like(q), where=p > 0), clip_max)
            dlogits = w[z[t]] * score_vector(p, z[t])
            for token in range(policy.vocab_size):
                if p[token] > 0:
                    dlogits = dlogits + (n - 1) * p[token] * w[token] * score_vector(p, token)
            add_logit_grad(policy, grad, fwd, z[:t], scale * dlogits)
        total += grad
    return total / len(rationales)
