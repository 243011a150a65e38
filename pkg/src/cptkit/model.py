"""Conditional models Q(.|z) for the law of X given Z.

Three families are provided:

* ``GaussianLinearModel``: N(b'z, sigma2), covariates are real p-vectors.
* ``KernelGaussianModel``: N(mu(z), sigma2(z)) with route-grouped Gaussian
  kernel moments over a circular time-of-day axis; covariates are
  ``(route, time_min)`` pairs.
* ``DiscreteTabularModel``: a probability table over a finite support,
  covariates are hashable labels.

Densities are taken against Lebesgue measure for the Gaussian families and
counting measure for the tabular family, and are only ever handled in log
space. Models are immutable; sampling always takes an explicit generator.

Batch methods take a *sequence* of covariates (one per observation). The
module-level ``log_density``/``conditional_mean``/``sample`` functions are the
single-observation conveniences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Hashable, Mapping, Sequence

import numpy as np

from cptkit.errors import DataError, DomainError

LOG_2PI = math.log(2.0 * math.pi)
MINUTES_PER_DAY = 1440.0


class ConditionalModel:
    """Common interface. Subclasses implement the batch methods."""

    kind: str = ""

    def rows(self, z: Any) -> Any:
        """Validate a batch of covariates and convert to the internal form."""
        raise NotImplementedError

    def n_rows(self, rows: Any) -> int:
        raise NotImplementedError

    def logpdf(self, x: np.ndarray, z: Any) -> np.ndarray:
        """Row-aligned log q(x_i | z_i)."""
        raise NotImplementedError

    def loglik_matrix(self, x: np.ndarray, z: Any) -> np.ndarray:
        """``L[i, k] = log q(x_k | z_i)``; the only quantity the permutation sampler needs."""
        raise NotImplementedError

    def mean(self, z: Any) -> np.ndarray:
        raise NotImplementedError

    def draw(self, z: Any, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """One draw per covariate row; ``size`` stacks independent vectors along axis 0."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _GaussianModel(ConditionalModel):
    """Shared code for models that are Gaussian given z."""

    def moments(self, rows: Any) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def logpdf(self, x, z):
        rows = self.rows(z)
        mu, s2 = self.moments(rows)
        x = np.asarray(x, dtype=float)
        return -0.5 * (LOG_2PI + np.log(s2)) - (x - mu) ** 2 / (2.0 * s2)

    def loglik_matrix(self, x, z):
        rows = self.rows(z)
        mu, s2 = self.moments(rows)
        x = np.asarray(x, dtype=float)
        mu, s2 = mu[:, None], s2[:, None]
        return -0.5 * (LOG_2PI + np.log(s2)) - (x[None, :] - mu) ** 2 / (2.0 * s2)

    def mean(self, z):
        return self.moments(self.rows(z))[0]

    def draw(self, z, rng, size=None):
        mu, s2 = self.moments(self.rows(z))
        shape = mu.shape if size is None else (size,) + mu.shape
        return mu + np.sqrt(s2) * rng.standard_normal(shape)


@dataclass(frozen=True, eq=False)
class GaussianLinearModel(_GaussianModel):
    b: np.ndarray
    sigma2: float = 1.0

    kind = "gaussian_linear"

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).copy()
        if b.ndim != 1 or not np.all(np.isfinite(b)):
            raise DomainError("coefficient vector b must be a finite 1-d array")
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise DomainError(f"sigma2 must be positive and finite, got {self.sigma2}")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def p(self) -> int:
        return self.b.shape[0]

    def rows(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1 and self.p == 1:
            z = z[:, None]
        if z.ndim != 2 or z.shape[1] != self.p:
            raise DomainError(f"covariates must have {self.p} columns, got shape {z.shape}")
        return z

    def n_rows(self, rows):
        return rows.shape[0]

    def moments(self, rows):
        mu = rows @ self.b
        return mu, np.full_like(mu, self.sigma2)

    def to_dict(self):
        return {"kind": self.kind, "b": self.b.tolist(), "sigma2": self.sigma2}

    def __repr__(self):
        return f"GaussianLinearModel(p={self.p}, sigma2={self.sigma2!r})"


def circular_minutes(t1, t2) -> np.ndarray:
    """Time-of-day distance on a 24h clock: 23:00 vs 01:00 is 120 minutes."""
    d = np.abs(np.asarray(t1, dtype=float) - np.asarray(t2, dtype=float)) % MINUTES_PER_DAY
    return np.minimum(d, MINUTES_PER_DAY - d)


@dataclass(frozen=True, eq=False)
class _RouteGroup:
    times: np.ndarray  # sorted
    x: np.ndarray


@dataclass(frozen=True, eq=False)
class KernelGaussianModel(_GaussianModel):
    """Route-grouped Gaussian-kernel estimate of the conditional mean and variance.

    ``groups`` maps a route label to ``(times, x)`` training arrays. With
    weights ``w_i = 1{route_i = route} * exp(-dt_i^2 / (2 h^2))`` the model
    uses the weighted mean and weighted variance of ``x``; the variance is
    clamped below at ``variance_floor``.

    Evaluation only visits training points within ``window_sds * h`` of the
    query (relative weight below ``exp(-window_sds^2 / 2)``); set
    ``exact=True`` to sum over the whole route group instead.
    """

    groups: Mapping[Hashable, tuple[Sequence[float], Sequence[float]]]
    bandwidth_h: float = 20.0
    variance_floor: float = 0.0
    exact: bool = False
    window_sds: float = 10.0
    _groups: dict = field(init=False, repr=False)

    kind = "kernel_gaussian"

    def __post_init__(self):
        if not (self.bandwidth_h > 0 and math.isfinite(self.bandwidth_h)):
            raise DomainError(f"bandwidth_h must be positive, got {self.bandwidth_h}")
        if not self.variance_floor >= 0:
            raise DomainError("variance_floor must be nonnegative")
        groups = {}
        for route, (times, xs) in self.groups.items():
            times = np.asarray(times, dtype=float) % MINUTES_PER_DAY
            xs = np.asarray(xs, dtype=float)
            if times.shape != xs.shape or times.ndim != 1:
                raise DomainError(f"route {route!r}: times and x must be equal-length vectors")
            if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(times))):
                raise DomainError(f"route {route!r}: training values must be finite")
            order = np.argsort(times, kind="stable")
            groups[route] = _RouteGroup(times[order], xs[order])
        object.__setattr__(self, "_groups", groups)

    @property
    def routes(self) -> list:
        return list(self._groups)

    def rows(self, z):
        routes, times = [], []
        for item in z:
            try:
                route, t = item
            except (TypeError, ValueError):
                raise DomainError(f"kernel covariate must be a (route, time) pair, got {item!r}")
            t = float(t)
            if not (0.0 <= t < MINUTES_PER_DAY):
                raise DomainError(f"time of day {t} outside [0, 1440)")
            routes.append(route)
            times.append(t)
        return routes, np.asarray(times, dtype=float)

    def n_rows(self, rows):
        return len(rows[0])

    def _weights(self, g: _RouteGroup, t: float) -> tuple[np.ndarray, np.ndarray]:
        h = self.bandwidth_h
        cut = self.window_sds * h
        if self.exact or cut >= MINUTES_PER_DAY / 2:
            sel_t, sel_x = g.times, g.x
        else:
            lo, hi = t - cut, t + cut
            segments = []
            for a, b in _wrap_intervals(lo, hi):
                i0 = np.searchsorted(g.times, a, side="left")
                i1 = np.searchsorted(g.times, b, side="right")
                segments.append(slice(i0, i1))
            sel_t = np.concatenate([g.times[s] for s in segments])
            sel_x = np.concatenate([g.x[s] for s in segments])
        d = circular_minutes(sel_t, t)
        return np.exp(-(d**2) / (2.0 * h * h)), sel_x

    def _raw_moments(self, route, t) -> tuple[float, float, float]:
        g = self._groups.get(route)
        if g is None:
            return 0.0, math.nan, math.nan
        w, xs = self._weights(g, t)
        mass = float(w.sum())
        if mass <= 0.0:
            return 0.0, math.nan, math.nan
        mu = float(w @ xs) / mass
        var = float(w @ (xs - mu) ** 2) / mass
        return mass, mu, var

    def effective_mass(self, z) -> np.ndarray:
        routes, times = self.rows(z)
        return np.array([self._raw_moments(r, t)[0] for r, t in zip(routes, times)])

    def raw_moments(self, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(N(z), mu(z), unclamped sigma2(z)) per covariate row."""
        routes, times = self.rows(z)
        out = np.array([self._raw_moments(r, t) for r, t in zip(routes, times)]).reshape(-1, 3)
        return out[:, 0], out[:, 1], out[:, 2]

    def moments(self, rows):
        routes, times = rows
        mu = np.empty(len(routes))
        s2 = np.empty(len(routes))
        for i, (r, t) in enumerate(zip(routes, times)):
            mass, m, v = self._raw_moments(r, t)
            if mass <= 0.0:
                if r not in self._groups:
                    raise DomainError(f"unknown route label {r!r}")
                raise DomainError(f"zero kernel mass at route {r!r}, time {t}")
            mu[i] = m
            s2[i] = max(v, self.variance_floor)
        return mu, s2

    def to_dict(self):
        return {
            "kind": self.kind,
            "bandwidth_h": self.bandwidth_h,
            "variance_floor": self.variance_floor,
            "window_sds": self.window_sds,
            "groups": [
                {"route": route, "time_min": g.times.tolist(), "x": g.x.tolist()}
                for route, g in self._groups.items()
            ],
        }

    def __repr__(self):
        return (
            f"KernelGaussianModel(routes={len(self._groups)}, bandwidth_h={self.bandwidth_h!r}, "
            f"variance_floor={self.variance_floor!r})"
        )


def _wrap_intervals(lo: float, hi: float) -> list[tuple[float, float]]:
    """Split [lo, hi] (possibly crossing midnight) into in-range intervals."""
    if lo < 0.0:
        return [(0.0, hi), (lo + MINUTES_PER_DAY, MINUTES_PER_DAY)]
    if hi >= MINUTES_PER_DAY:
        return [(lo, MINUTES_PER_DAY), (0.0, hi - MINUTES_PER_DAY)]
    return [(lo, hi)]


@dataclass(frozen=True, eq=False)
class DiscreteTabularModel(ConditionalModel):
    """X takes values in ``support``; ``probs[label]`` is its law given Z = label."""

    support: Sequence[float]
    probs: Mapping[Hashable, Sequence[float]]
    _table: np.ndarray = field(init=False, repr=False)
    _labels: dict = field(init=False, repr=False)

    kind = "discrete_tabular"

    def __post_init__(self):
        support = tuple(float(v) for v in self.support)
        if len(support) == 0 or len(set(support)) != len(support):
            raise DomainError("support must be a nonempty list of distinct values")
        labels, table = {}, []
        for label, pv in self.probs.items():
            pv = np.asarray(pv, dtype=float)
            if pv.shape != (len(support),):
                raise DomainError(f"label {label!r}: probability vector has wrong length")
            if np.any(pv < 0) or abs(pv.sum() - 1.0) > 1e-12:
                raise DomainError(f"label {label!r}: not a probability vector")
            labels[label] = len(table)
            table.append(pv)
        if not table:
            raise DomainError("probs must define at least one label")
        table = np.array(table)
        table.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_labels", labels)

    def rows(self, z):
        try:
            return np.array([self._labels[label] for label in z], dtype=np.intp)
        except KeyError as exc:
            raise DomainError(f"unknown covariate label {exc.args[0]!r}") from None

    def n_rows(self, rows):
        return rows.shape[0]

    def prob_vector(self, label) -> np.ndarray:
        return self._table[self.rows([label])[0]]

    def support_index(self, x) -> np.ndarray:
        """Index of each x in the support, -1 where x is outside it."""
        x = np.asarray(x, dtype=float)
        sup = np.asarray(self.support)
        hit = x[..., None] == sup
        return np.where(hit.any(axis=-1), hit.argmax(axis=-1), -1)

    def _logp(self, rows, idx):
        with np.errstate(divide="ignore"):
            logtab = np.log(self._table)
        out = logtab[rows, np.maximum(idx, 0)]
        return np.where(idx >= 0, out, -np.inf)

    def logpdf(self, x, z):
        return self._logp(self.rows(z), self.support_index(x))

    def loglik_matrix(self, x, z):
        rows = self.rows(z)
        idx = self.support_index(x)
        return self._logp(rows[:, None], idx[None, :])

    def mean(self, z):
        return self._table[self.rows(z)] @ np.asarray(self.support)

    def draw(self, z, rng, size=None):
        rows = self.rows(z)
        cdf = np.cumsum(self._table[rows], axis=1)
        shape = rows.shape if size is None else (size,) + rows.shape
        u = rng.random(shape)
        idx = (u[..., None] >= cdf).sum(axis=-1)
        idx = np.minimum(idx, len(self.support) - 1)
        return np.asarray(self.support)[idx]

    def to_dict(self):
        return {
            "kind": self.kind,
            "support": list(self.support),
            "probs": [[label, self._table[i].tolist()] for label, i in self._labels.items()],
        }


# -- single-observation conveniences -------------------------------------------------


def log_density(model: ConditionalModel, x: float, z: Any) -> float:
    """log q(x|z) for one observation (-inf where the density is exactly zero)."""
    return float(model.logpdf(np.array([x], dtype=float), [z])[0])


def conditional_mean(model: ConditionalModel, z: Any) -> float:
    return float(model.mean([z])[0])


def sample(model: ConditionalModel, z: Any, rng: np.random.Generator) -> float:
    return float(model.draw([z], rng)[0])


# -- JSON ----------------------------------------------------------------------------


def model_from_dict(doc: Mapping[str, Any]) -> ConditionalModel:
    try:
        kind = doc["kind"]
        if kind == GaussianLinearModel.kind:
            return GaussianLinearModel(b=doc["b"], sigma2=doc["sigma2"])
        if kind == KernelGaussianModel.kind:
            groups = {
                _hashable(g["route"]): (g["time_min"], g["x"]) for g in doc["groups"]
            }
            return KernelGaussianModel(
                groups=groups,
                bandwidth_h=doc["bandwidth_h"],
                variance_floor=doc.get("variance_floor", 0.0),
                window_sds=doc.get("window_sds", 10.0),
            )
        if kind == DiscreteTabularModel.kind:
            return DiscreteTabularModel(
                support=doc["support"],
                probs={_hashable(label): pv for label, pv in doc["probs"]},
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DomainError):
            raise
        raise DataError(f"malformed model document: {exc!r}") from None
    raise DataError(f"unknown model kind {doc.get('kind')!r}")


def _hashable(label):
    return tuple(label) if isinstance(label, list) else label


def load_model(path) -> ConditionalModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return model_from_dict(doc)


def save_model(model: ConditionalModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(model.to_json())
        fh.write("\n")
