"""Test statistics, the Monte Carlo p-value, and the CPT/CRT drivers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from cptkit import streams
from cptkit.errors import DomainError, PreconditionError
from cptkit.model import ConditionalModel
from cptkit.sampler import ChainConfig, crt_draws, exchangeable_draws

STATISTICS = ("abs_corr", "residual_corr", "categorical_max_corr")


class DegenerateStatisticError(PreconditionError):
    """A correlation was requested for a vector with zero sample variance."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed triples. ``z`` is whatever the conditional model accepts as covariate rows.

    ``y`` is real-valued unless ``categorical`` is set, in which case it holds
    level labels.
    """

    x: np.ndarray
    y: np.ndarray
    z: Any
    categorical: bool = False

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1:
            raise DomainError("x must be a vector")
        if not np.all(np.isfinite(x)):
            raise DomainError("x has non-finite entries")
        n = x.shape[0]
        if self.categorical:
            y = np.asarray(self.y, dtype=object)
        else:
            y = np.asarray(self.y, dtype=float)
            if not np.all(np.isfinite(y)):
                raise DomainError("y has non-finite entries")
        if y.shape != (n,):
            raise DomainError(f"y has length {y.shape[0] if y.ndim else 0}, expected {n}")
        if len(self.z) != n:
            raise DomainError(f"z has {len(self.z)} rows, expected {n}")
        if isinstance(self.z, np.ndarray) and self.z.dtype.kind == "f" and not np.all(np.isfinite(self.z)):
            raise DomainError("z has non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def levels(self) -> list:
        if not self.categorical:
            return []
        return sorted(set(self.y.tolist()), key=str)


# -- correlation helpers ---------------------------------------------------------------


def _row_abs_corr(X: np.ndarray, v: np.ndarray) -> np.ndarray:
    """|Pearson corr| of each row of X with v; 0 for any constant row or constant v."""
    X = np.atleast_2d(X)
    if np.ptp(v) == 0:
        return np.zeros(X.shape[0])
    Xc = X - X.mean(axis=1, keepdims=True)
    vc = v - v.mean()
    # row-wise sums so a row's value does not depend on how many rows are batched
    num = (Xc * vc).sum(axis=1)
    den = np.sqrt((Xc * Xc).sum(axis=1) * (vc @ vc))
    const = np.ptp(X, axis=1) == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.abs(num) / den
    return np.where(const, 0.0, np.minimum(r, 1.0))


def abs_corr(x, y) -> float:
    """Absolute sample Pearson correlation, sum(xc*yc) / sqrt(sum(xc^2) sum(yc^2))."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise PreconditionError("abs_corr needs two equal-length vectors with n >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateStatisticError("zero sample variance")
    return float(_row_abs_corr(x[None, :], y)[0])


def residual_corr(x, y, z, model: ConditionalModel) -> float:
    """|Corr(x - E[X|z], y)|, 0 when either vector is constant."""
    x = np.asarray(x, dtype=float)
    return float(_row_abs_corr((x - model.mean(z))[None, :], np.asarray(y, dtype=float))[0])


def _indicators(y) -> np.ndarray:
    y = np.asarray(y, dtype=object)
    cols = []
    for level in sorted(set(y.tolist()), key=str):
        d = (y == level).astype(float)
        if np.ptp(d) > 0:
            cols.append(d)
    return np.array(cols).reshape(len(cols), y.shape[0])


def _max_corr_rows(R: np.ndarray, dummies: np.ndarray) -> np.ndarray:
    if dummies.shape[0] == 0:
        return np.zeros(R.shape[0])
    return np.max([_row_abs_corr(R, d) for d in dummies], axis=0)


def categorical_max_corr(x, y, z, model: ConditionalModel) -> float:
    """max over levels of |Corr(residual, 1{y = level})|, skipping constant indicators."""
    R = np.asarray(x, dtype=float) - model.mean(z)
    return float(_max_corr_rows(R[None, :], _indicators(y))[0])


@dataclass(frozen=True, eq=False)
class Statistic:
    """A test statistic T(x, y, z). Residual kinds need the conditional model."""

    kind: str = "abs_corr"
    model: ConditionalModel | None = None

    def __post_init__(self):
        if self.kind not in STATISTICS:
            raise PreconditionError(f"unknown statistic {self.kind!r}; choose from {STATISTICS}")
        if self.kind != "abs_corr" and self.model is None:
            raise PreconditionError(f"statistic {self.kind} needs a conditional model")

    def batch(self, X: np.ndarray, y, z) -> np.ndarray:
        """Evaluate on every row of X against the same (y, z). Degenerate cases give 0."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "categorical_max_corr":
            return _max_corr_rows(X - self.model.mean(z), _indicators(y))
        y = np.asarray(y, dtype=float)
        if self.kind == "residual_corr":
            X = X - self.model.mean(z)
        return _row_abs_corr(X, y)

    def __call__(self, x, y, z) -> float:
        return float(self.batch(np.asarray(x, dtype=float)[None, :], y, z)[0])


def p_value(t_observed: float, t_copies) -> float:
    """(1 + #{m : T_m >= T_obs}) / (1 + M); ties count against rejection."""
    t_copies = np.asarray(t_copies, dtype=float)
    if t_copies.size == 0:
        raise PreconditionError("p_value needs at least one copy statistic")
    return (1 + int(np.count_nonzero(t_copies >= t_observed))) / (1 + t_copies.size)


@dataclass
class TestResult:
    method: str
    p_value: float
    t_observed: float
    t_copies: np.ndarray
    seed: int
    M: int
    S: int | None = None
    statistic: str = "abs_corr"
    warnings: list[str] = field(default_factory=list)

    __test__ = False  # not a pytest class

    def to_dict(self, include_copies: bool = False) -> dict:
        doc = {
            "method": self.method,
            "p_value": self.p_value,
            "t_observed": self.t_observed,
            "M": self.M,
            "S": self.S,
            "seed": self.seed,
            "statistic": self.statistic,
            "warnings": list(self.warnings),
        }
        if include_copies:
            doc["t_copies"] = [float(t) for t in self.t_copies]
        return doc

    def to_json(self, include_copies: bool = False) -> str:
        return json.dumps(self.to_dict(include_copies), indent=2, sort_keys=True)


REUSE_WARNING = "model_fitted_on_test_data: validity guarantee does not cover a data-dependent model"


def _assemble(method, dataset, statistic, copies, seed, M, S, reused) -> TestResult:
    t_obs = float(statistic.batch(dataset.x[None, :], dataset.y, dataset.z)[0])
    t_copies = statistic.batch(copies, dataset.y, dataset.z)
    warnings = [REUSE_WARNING] if reused else []
    return TestResult(
        method=method,
        p_value=p_value(t_obs, t_copies),
        t_observed=t_obs,
        t_copies=t_copies,
        seed=int(seed),
        M=int(M),
        S=S,
        statistic=statistic.kind,
        warnings=warnings,
    )


def run_cpt_test(
    dataset: Dataset,
    model: ConditionalModel,
    statistic: Statistic | None = None,
    config: ChainConfig | None = None,
    *,
    threads: int | None = None,
    model_fitted_on_test_data: bool = False,
) -> TestResult:
    """Conditional permutation test with copies from the exchangeable sampler."""
    statistic = statistic or Statistic()
    config = config or ChainConfig()
    perms = exchangeable_draws(dataset.x, dataset.z, model, config, threads=threads)
    copies = dataset.x[perms]
    return _assemble(
        "CPT", dataset, statistic, copies, config.seed, config.copies_M, config.steps_S,
        model_fitted_on_test_data,
    )


def run_crt_test(
    dataset: Dataset,
    model: ConditionalModel,
    statistic: Statistic | None = None,
    M: int = 500,
    seed: int = 0,
    *,
    model_fitted_on_test_data: bool = False,
) -> TestResult:
    """Conditional randomization test with i.i.d. copies drawn from the model."""
    statistic = statistic or Statistic()
    if dataset.n < 1:
        raise PreconditionError("empty dataset")
    copies = crt_draws(dataset.z, model, M, streams.substream(seed, streams.CRT))
    return _assemble("CRT", dataset, statistic, copies, seed, M, None, model_fitted_on_test_data)


def rejection_stderr(rate: float, trials: int) -> float:
    return math.sqrt(rate * (1.0 - rate) / trials)
