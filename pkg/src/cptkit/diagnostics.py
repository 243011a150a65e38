"""Robustness and mixing diagnostics.

Divergence utilities bound how far the assumed model is from the truth (only
an upper bound is available for continuous product laws; discrete product
laws get exact TV by enumeration). The trace and transition-matrix helpers
check the pairwise permutation chain.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from cptkit.errors import PreconditionError
from cptkit.model import ConditionalModel, DiscreteTabularModel
from cptkit.sampler import _n_uniforms, _step, log_table, cpt_distribution

PRODUCT_TV_MAX_OUTCOMES = 2**20
TRANSITION_MAX_N = 4


def gaussian_kl(mu_star: float, s2_star: float, mu_hat: float, s2_hat: float) -> float:
    """KL( N(mu_star, s2_star) || N(mu_hat, s2_hat) )."""
    if not (s2_star > 0 and s2_hat > 0):
        raise PreconditionError("variances must be positive")
    return (
        0.5 * math.log(s2_hat / s2_star)
        + s2_star / (2.0 * s2_hat)
        - 0.5
        + (mu_hat - mu_star) ** 2 / (2.0 * s2_hat)
    )


def gaussian_kl_sum(model_star: ConditionalModel, model_hat: ConditionalModel, z) -> float:
    """Sum over rows of z of KL(Q*(.|z_i) || Q(.|z_i)) for two Gaussian-family models."""
    mu_s, s2_s = model_star.moments(model_star.rows(z))
    mu_h, s2_h = model_hat.moments(model_hat.rows(z))
    kl = 0.5 * np.log(s2_h / s2_s) + s2_s / (2 * s2_h) - 0.5 + (mu_h - mu_s) ** 2 / (2 * s2_h)
    return float(np.sum(kl))


def pinsker_tv_bound(kl_sum: float) -> float:
    """Upper bound sqrt(KL / 2) on the total variation distance."""
    if kl_sum < 0:
        raise PreconditionError("KL divergence must be nonnegative")
    return math.sqrt(kl_sum / 2.0)


def _check_prob(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise PreconditionError(f"{name} is not a probability vector")


def discrete_tv(p, q) -> tuple[float, np.ndarray]:
    """(TV distance, indices of the maximizing event {k : p_k > q_k})."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise PreconditionError("probability vectors differ in length")
    _check_prob(p, "p")
    _check_prob(q, "q")
    return 0.5 * float(np.abs(p - q).sum()), np.flatnonzero(p > q)


@dataclass(frozen=True)
class ProductTV:
    tv: float
    outcomes: np.ndarray  # all support^n outcomes, one per row
    event: np.ndarray  # boolean mask over outcomes: the set A(Z)
    prob_star: np.ndarray
    prob_hat: np.ndarray

    def contains(self, x) -> bool:
        hit = np.all(self.outcomes == np.asarray(x, dtype=float), axis=1)
        return bool(np.any(hit & self.event))


def product_tv_discrete(
    model_star: DiscreteTabularModel, model_hat: DiscreteTabularModel, z_labels
) -> ProductTV:
    """Exact TV between prod_i Q*(.|z_i) and prod_i Q(.|z_i) by enumerating X^n.

    Also returns the maximizing event A(Z) = {x : Q*^n(x) > Q^n(x)}.
    """
    if tuple(model_star.support) != tuple(model_hat.support):
        raise PreconditionError("models must share a support")
    n = len(z_labels)
    k = len(model_star.support)
    if k**n > PRODUCT_TV_MAX_OUTCOMES:
        raise PreconditionError(f"{k}^{n} outcomes exceeds the enumeration limit {PRODUCT_TV_MAX_OUTCOMES}")
    idx = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.intp).reshape(-1, n)
    ps = np.array([model_star.prob_vector(z) for z in z_labels]).reshape(n, k)
    ph = np.array([model_hat.prob_vector(z) for z in z_labels]).reshape(n, k)
    cols = np.arange(n)
    prob_star = np.prod(ps[cols, idx], axis=1)
    prob_hat = np.prod(ph[cols, idx], axis=1)
    tv = 0.5 * float(np.abs(prob_star - prob_hat).sum())
    outcomes = np.asarray(model_star.support)[idx]
    return ProductTV(tv, outcomes, prob_star > prob_hat, prob_star, prob_hat)


# -- chain traces ----------------------------------------------------------------------


@dataclass
class ChainTrace:
    loglik: np.ndarray
    corr_with_original: np.ndarray

    @property
    def steps(self) -> int:
        return self.loglik.shape[0] - 1


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])


def chain_trace(x, z, model: ConditionalModel, steps: int, rng: np.random.Generator) -> ChainTrace:
    """Run the pairwise chain from the observed assignment, recording per step the
    log-likelihood sum_i log q(x_perm(i) | z_i) and Corr(x, x[perm]).

    NaN marks the correlation when x is constant.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise PreconditionError(f"the pairwise sampler needs n >= 2 observations, got n={n}")
    logq = log_table(model, x, z)
    rows = np.arange(n)
    state = np.arange(n)[None, :]
    loglik = np.empty(steps + 1)
    corr = np.empty(steps + 1)
    k = _n_uniforms(n)
    for s in range(steps + 1):
        if s:
            _step(state, logq, rng.random((1, k)))
        loglik[s] = float(np.sum(logq(rows, state[0])))
        corr[s] = _corr(x, x[state[0]])
    return ChainTrace(loglik, corr)


def lag1_autocorr(v) -> float:
    v = np.asarray(v, dtype=float)
    vc = v - v.mean()
    den = vc @ vc
    if den == 0:
        return math.nan
    return float(vc[:-1] @ vc[1:] / den)


def write_trace_csv(path, traces: list[ChainTrace] | ChainTrace, with_chain: bool = True) -> None:
    """CSV with columns ([chain,] step, loglik, corr); a NaN correlation is written empty."""
    if isinstance(traces, ChainTrace):
        traces = [traces]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["chain"] if with_chain else []) + ["step", "loglik", "corr"])
        for c, tr in enumerate(traces):
            for s in range(tr.steps + 1):
                corr = tr.corr_with_original[s]
                row = [s, repr(float(tr.loglik[s])), "" if math.isnan(corr) else repr(float(corr))]
                w.writerow(([c] if with_chain else []) + row)


# -- exact transition kernel -----------------------------------------------------------


def pair_partitions(n: int) -> list[list[tuple[int, int]]]:
    """All ways to choose floor(n/2) disjoint unordered pairs from range(n)."""

    def rec(items: tuple[int, ...], need: int):
        if need == 0:
            yield []
            return
        if len(items) < 2 * need:
            return
        first, rest = items[0], items[1:]
        # first element left unpaired (only possible when there is slack)
        if len(items) > 2 * need:
            yield from rec(rest, need)
        for t, other in enumerate(rest):
            for tail in rec(rest[:t] + rest[t + 1 :], need - 1):
                yield [(first, other)] + tail

    return list(rec(tuple(range(n)), n // 2))


def transition_matrix(x, z, model: ConditionalModel) -> tuple[np.ndarray, np.ndarray]:
    """Exact one-step kernel of the pairwise chain over all n! permutations (n <= 4).

    Returns ``(perms, P)`` with ``P[a, b]`` the probability of moving from
    ``perms[a]`` to ``perms[b]``. Shuffling positions and chunking into pairs
    makes every pair partition equally likely, so the kernel is the average
    over partitions of the product of independent per-pair swap kernels.
    """
    n = len(x)
    if n > TRANSITION_MAX_N:
        raise PreconditionError(f"transition matrix limited to n <= {TRANSITION_MAX_N}, got n={n}")
    if n < 2:
        raise PreconditionError("the pairwise sampler needs n >= 2")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    index = {tuple(p): a for a, p in enumerate(perms)}
    L = model.loglik_matrix(np.asarray(x, dtype=float), z)
    partitions = pair_partitions(n)
    P = np.zeros((len(perms), len(perms)))
    for a, perm in enumerate(perms):
        for part in partitions:
            accept = []
            for i, j in part:
                lo = (L[i, perm[j]] + L[j, perm[i]]) - (L[i, perm[i]] + L[j, perm[j]])
                accept.append(0.5 if math.isnan(lo) else float(expit(lo)))
            for mask in itertools.product((False, True), repeat=len(part)):
                prob = 1.0
                new = perm.copy()
                for (i, j), swap, pa in zip(part, mask, accept):
                    if swap:
                        prob *= pa
                        new[i], new[j] = perm[j], perm[i]
                    else:
                        prob *= 1.0 - pa
                P[a, index[tuple(new)]] += prob / len(partitions)
    return perms, P


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Leading left eigenvector of a stochastic matrix, normalized to sum 1."""
    w, V = np.linalg.eig(P.T)
    v = np.real(V[:, np.argmin(np.abs(w - 1.0))])
    return v / v.sum()


def detailed_balance_gap(P: np.ndarray, pi: np.ndarray) -> float:
    flow = pi[:, None] * P
    return float(np.max(np.abs(flow - flow.T)))


def exact_law(x, z, model: ConditionalModel) -> tuple[np.ndarray, np.ndarray]:
    """Alias of the enumerated CPT law, ordered like ``transition_matrix``."""
    return cpt_distribution(x, z, model)
