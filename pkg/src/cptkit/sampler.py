"""Permutation copies for the CPT and resampled copies for the CRT.

A permutation is an integer array ``perm`` of length n holding a bijection of
``{0, ..., n-1}``; the permuted data vector is ``x[perm]``, i.e. observation i
is assigned the value ``x[perm[i]]``. The target law over permutations is

    P(perm) ∝ prod_i q(x[perm[i]] | z_i),

and the pairwise chain moves between permutations by swapping the values held
by disjoint pairs of positions.

Randomness: one step of the pairwise chain consumes exactly ``n + n // 2``
uniforms from its generator (``n`` to shuffle positions into pairs and one per
pair for the accept decision). A chain of S steps therefore consumes an
``(S, n + n // 2)`` block, which is what lets many chains with their own keyed
generators be advanced together in one vectorized loop while producing the
same result as running each chain on its own.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy.special import expit, logsumexp

from cptkit import streams
from cptkit.errors import PreconditionError
from cptkit.model import ConditionalModel

EXACT_MAX_N = 8
# cap on uniforms materialized per vectorized batch of copy chains
_BATCH_UNIFORMS = 1 << 22
_DENSE_MAX_N = 2048


@dataclass(frozen=True)
class ChainConfig:
    steps_S: int = 50
    copies_M: int = 500
    seed: int = 0

    def __post_init__(self):
        if int(self.steps_S) != self.steps_S or self.steps_S < 0:
            raise PreconditionError(f"steps_S must be a nonnegative integer, got {self.steps_S}")
        if int(self.copies_M) != self.copies_M or self.copies_M < 1:
            raise PreconditionError(f"copies_M must be a positive integer, got {self.copies_M}")
        if not 0 <= int(self.seed) < 2**64:
            raise PreconditionError("seed must fit in 64 unsigned bits")


# -- permutations ----------------------------------------------------------------------


def identity(n: int) -> np.ndarray:
    return np.arange(n)


def is_permutation(perm) -> bool:
    perm = np.asarray(perm)
    return perm.ndim == 1 and np.array_equal(np.sort(perm), np.arange(perm.shape[0]))


def compose(p, q) -> np.ndarray:
    """``(p ∘ q)[i] = p[q[i]]``; ``x[compose(p, q)] == x[p][q]``."""
    return np.asarray(p)[np.asarray(q)]


def invert(p) -> np.ndarray:
    p = np.asarray(p)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.shape[0])
    return inv


# -- log-odds --------------------------------------------------------------------------


def swap_log_odds(model: ConditionalModel, xi: float, xj: float, zi: Any, zj: Any) -> float:
    """log[q(xj|zi) q(xi|zj)] - log[q(xi|zi) q(xj|zj)] for exchanging the values at i and j.

    Returns +/-inf when exactly one arrangement has zero density and 0 when
    both do.
    """
    lp = model.logpdf(np.array([xj, xi, xi, xj], dtype=float), [zi, zj, zi, zj])
    out = (lp[0] + lp[1]) - (lp[2] + lp[3])
    return 0.0 if math.isnan(out) else float(out)


def log_table(model: ConditionalModel, x, z) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Vectorized ``f(i, k) = log q(x[k] | z[i])``.

    Small problems materialize the n x n matrix; past ``_DENSE_MAX_N``
    Gaussian models are evaluated pointwise from per-row moments so memory
    stays O(n).
    """
    x = np.asarray(x, dtype=float)
    moments = getattr(model, "moments", None)
    if moments is not None and x.shape[0] > _DENSE_MAX_N:
        mu, s2 = moments(model.rows(z))
        half_log = 0.5 * (np.log(2.0 * np.pi) + np.log(s2))
        inv2s2 = 0.5 / s2

        def f(i, k):
            return -half_log[i] - (x[k] - mu[i]) ** 2 * inv2s2[i]

        return f
    L = model.loglik_matrix(x, z)
    return lambda i, k: L[i, k]


def _n_uniforms(n: int) -> int:
    return n + n // 2


def _step(states: np.ndarray, logq, u: np.ndarray) -> None:
    """Advance every row of ``states`` by one pairwise step in place.

    ``u`` has shape ``(R, n + n // 2)``.
    """
    R, n = states.shape
    half = n // 2
    order = np.argsort(u[:, :n], axis=1, kind="stable")
    i = order[:, 0 : 2 * half : 2]
    j = order[:, 1 : 2 * half : 2]
    rows = np.arange(R)[:, None]
    pi = states[rows, i]
    pj = states[rows, j]
    lo = (logq(i, pj) + logq(j, pi)) - (logq(i, pi) + logq(j, pj))
    lo = np.where(np.isnan(lo), 0.0, lo)
    accept = u[:, n:] < expit(lo)
    states[rows, i] = np.where(accept, pj, pi)
    states[rows, j] = np.where(accept, pi, pj)


def _advance(states: np.ndarray, logq, blocks: np.ndarray) -> np.ndarray:
    """Run chains whose uniforms are pre-drawn: ``blocks`` is ``(R, S, n + n//2)``."""
    states = np.array(states, dtype=np.intp, copy=True)
    for s in range(blocks.shape[1]):
        _step(states, logq, blocks[:, s, :])
    return states


def _check_n(n: int) -> None:
    if n < 2:
        raise PreconditionError(f"the pairwise sampler needs n >= 2 observations, got n={n}")


def pairwise_step(perm, x, z, model: ConditionalModel, rng: np.random.Generator) -> np.ndarray:
    """One step of the parallelized pairwise sampler.

    Positions are shuffled and chunked into floor(n/2) disjoint pairs (the
    leftover position for odd n stays put); each pair independently swaps its
    values with probability ``expit(swap log-odds)``.
    """
    perm = np.asarray(perm, dtype=np.intp)
    n = perm.shape[0]
    _check_n(n)
    states = perm[None, :].copy()
    _step(states, log_table(model, x, z), rng.random((1, _n_uniforms(n))))
    return states[0]


def run_chain(perm0, x, z, model: ConditionalModel, steps_S: int, rng: np.random.Generator) -> np.ndarray:
    """Compose ``steps_S`` pairwise steps starting from ``perm0``."""
    return run_chains(np.asarray(perm0)[None, :], x, z, model, steps_S, rng)[0]


def run_chains(perms0, x, z, model: ConditionalModel, steps_S: int, rng: np.random.Generator) -> np.ndarray:
    """Run R chains (rows of ``perms0``) sharing one generator, step-major.

    With R = 1 this consumes the generator exactly like ``run_chain``.
    """
    if steps_S < 0:
        raise PreconditionError("steps_S must be >= 0")
    states = np.array(perms0, dtype=np.intp, copy=True)
    if steps_S == 0:
        return states
    R, n = states.shape
    _check_n(n)
    logq = log_table(model, x, z)
    k = _n_uniforms(n)
    for _ in range(steps_S):
        _step(states, logq, rng.random((R, k)))
    return states


def exchangeable_draws(
    x, z, model: ConditionalModel, config: ChainConfig, threads: int | None = None
) -> np.ndarray:
    """M exchangeable permutations via a hub state.

    A chain of S steps from the identity (the observed assignment) gives the
    hub; each copy is an independent S-step chain from the hub. The hub uses
    the ``(seed, HUB)`` substream and copy m uses ``(seed, COPY, m)``, so the
    output is identical for any ``threads``. Returns an ``(M, n)`` array.
    """
    n = len(x)
    _check_n(n)
    S, M, seed = config.steps_S, config.copies_M, config.seed
    ident = identity(n)
    if S == 0:
        return np.tile(ident, (M, 1))
    logq = log_table(model, x, z)
    k = _n_uniforms(n)
    hub = _advance(ident[None, :], logq, streams.substream(seed, streams.HUB).random((1, S, k)))[0]

    batch = max(1, min(M, _BATCH_UNIFORMS // (S * k)))
    chunks = [range(a, min(a + batch, M)) for a in range(0, M, batch)]

    def run(chunk: range) -> np.ndarray:
        blocks = np.stack(
            [streams.substream(seed, streams.COPY, m).random((S, k)) for m in chunk]
        )
        return _advance(np.tile(hub, (len(chunk), 1)), logq, blocks)

    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def cpt_distribution(x, z, model: ConditionalModel) -> tuple[np.ndarray, np.ndarray]:
    """All n! permutations with their exact probabilities under the CPT law."""
    n = len(x)
    if n > EXACT_MAX_N:
        raise PreconditionError(f"exact enumeration limited to n <= {EXACT_MAX_N}, got n={n}")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp).reshape(-1, n)
    L = model.loglik_matrix(np.asarray(x, dtype=float), z)
    logw = L[np.arange(n), perms].sum(axis=1) if n else np.zeros(1)
    probs = np.exp(logw - logsumexp(logw))
    return perms, probs


def exact_cpt_sampler(x, z, model: ConditionalModel, rng: np.random.Generator) -> np.ndarray:
    """One permutation drawn from the exact CPT law by enumeration (n <= 8)."""
    perms, probs = cpt_distribution(x, z, model)
    return perms[rng.choice(len(perms), p=probs)].copy()


def crt_draws(z, model: ConditionalModel, M: int, rng: np.random.Generator) -> np.ndarray:
    """M independent vectors with entry i drawn from Q(.|z_i); shape ``(M, n)``."""
    if M < 1:
        raise PreconditionError("M must be >= 1")
    return model.draw(z, rng, size=M)
