"""Data ingestion, conditional-model fitting, and covariate screening.

CSV schemas (header names are exact):

* dataset file: ``x,y,z1,...,zp``. ``y`` is read as real when every value
  parses as a finite float, otherwise as categorical level labels.
* ride file: ``duration_s,route,time_min,y``. ``route`` is a directed
  start->end label, ``time_min`` is minutes after midnight in [0, 1440).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from cptkit.errors import DataError, DomainError, PreconditionError
from cptkit.inference import Dataset
from cptkit.model import GaussianLinearModel, KernelGaussianModel

log = logging.getLogger(__name__)

DEFAULT_BANDWIDTH_MIN = 20.0
DEFAULT_SCREEN_THRESHOLD = 20.0
RIDE_COLUMNS = ("duration_s", "route", "time_min", "y")


@dataclass(frozen=True, eq=False)
class UnlabeledSet:
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if x.ndim != 1 or z.ndim != 2 or z.shape[0] != x.shape[0]:
            raise DomainError("unlabeled x must be a vector with one z row per entry")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise DomainError("unlabeled data has non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class RideRecord:
    duration_x: float
    route: str
    time_of_day: float
    response_y: Any = None

    def __post_init__(self):
        if not (math.isfinite(self.duration_x) and self.duration_x > 0):
            raise DomainError(f"ride duration must be finite and positive, got {self.duration_x}")
        if not 0.0 <= self.time_of_day < 1440.0:
            raise DomainError(f"time of day {self.time_of_day} outside [0, 1440)")

    @property
    def z(self) -> tuple[str, float]:
        return (self.route, self.time_of_day)


def fit_gaussian_linear(unlabeled: UnlabeledSet) -> GaussianLinearModel:
    """Least-squares coefficients of x on z, with the ML variance RSS / N."""
    x, z = unlabeled.x, unlabeled.z
    N, p = z.shape
    if N < p or np.linalg.matrix_rank(z) < p:
        raise PreconditionError(f"design matrix ({N} x {p}) is rank deficient")
    b, *_ = np.linalg.lstsq(z, x, rcond=None)
    resid = x - z @ b
    sigma2 = float(resid @ resid) / N
    # a noiseless fit still needs a positive variance to define a density
    return GaussianLinearModel(b=b, sigma2=max(sigma2, np.finfo(float).tiny))


def fit_kernel_gaussian(
    train: Sequence[RideRecord],
    bandwidth_h: float = DEFAULT_BANDWIDTH_MIN,
    variance_floor: float | None = None,
    exact: bool = False,
) -> KernelGaussianModel:
    """Group rides by route; the default variance floor is 1e-8 times the training variance."""
    if len(train) == 0:
        raise DataError("empty training set")
    groups: dict[str, tuple[list[float], list[float]]] = {}
    for rec in train:
        times, xs = groups.setdefault(rec.route, ([], []))
        times.append(rec.time_of_day)
        xs.append(rec.duration_x)
    if variance_floor is None:
        allx = np.array([r.duration_x for r in train], dtype=float)
        var = float(allx.var())
        variance_floor = 1e-8 * var if var > 0 else 1e-8
    return KernelGaussianModel(
        groups=groups, bandwidth_h=bandwidth_h, variance_floor=variance_floor, exact=exact
    )


def effective_mass(model: KernelGaussianModel, z) -> float:
    """Kernel weight sum N(z) at one (route, time) covariate; 0 for an unseen route."""
    return float(model.effective_mass([z])[0])


def screen(
    records: Sequence[RideRecord], model: KernelGaussianModel, threshold: float = DEFAULT_SCREEN_THRESHOLD
) -> list[RideRecord]:
    """Keep records whose covariates carry at least ``threshold`` training mass.

    Only Z is consulted, so the kept X values remain unlooked-at.
    """
    if not records:
        return []
    mass = model.effective_mass([r.z for r in records])
    return [r for r, m in zip(records, mass) if m >= threshold]


def rides_to_dataset(records: Sequence[RideRecord], categorical: bool | None = None) -> Dataset:
    ys = [r.response_y for r in records]
    if categorical is None:
        categorical = not all(isinstance(v, float) for v in ys)
    return Dataset(
        x=np.array([r.duration_x for r in records], dtype=float),
        y=np.array(ys, dtype=object if categorical else float),
        z=[r.z for r in records],
        categorical=categorical,
    )


# -- CSV -------------------------------------------------------------------------------


@dataclass
class LoadReport:
    rows: int
    rejected: list[tuple[int, str]]


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"line {line}: column {column!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"line {line}: column {column!r}: non-finite value {text!r}")
    return v


def _maybe_float(text: str):
    try:
        v = float(text)
    except ValueError:
        return text
    return v if math.isfinite(v) else text


def _read(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no header")
        header = [h.strip() for h in header]
        rows = [(reader.line_num, row) for row in reader if row and any(c.strip() for c in row)]
    if not rows:
        raise DataError(f"{path}: no rows")
    return header, rows


def sniff_schema(path) -> str:
    """'rides' or 'dataset', from the header."""
    header, _ = _read(path)
    return "rides" if header[: len(RIDE_COLUMNS)] == list(RIDE_COLUMNS) else "dataset"


def load_dataset_csv(path) -> Dataset:
    header, rows = _read(path)
    if header[:2] != ["x", "y"]:
        raise DataError(f"{path}: header must start with x,y, got {header[:2]}")
    zcols = header[2:]
    expected = [f"z{k}" for k in range(1, len(zcols) + 1)]
    if zcols != expected:
        raise DataError(f"{path}: covariate columns must be {','.join(expected) or '(none)'}")
    if not zcols:
        raise DataError(f"{path}: missing covariate columns z1..zp")
    xs, ys, zs = [], [], []
    for line, row in rows:
        if len(row) != len(header):
            raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        xs.append(_parse_float(row[0], "x", line))
        ys.append(row[1].strip())
        zs.append([_parse_float(v, c, line) for v, c in zip(row[2:], zcols)])
    parsed = [_maybe_float(v) for v in ys]
    categorical = not all(isinstance(v, float) for v in parsed)
    log.info("loaded %d rows from %s (y %s)", len(xs), path, "categorical" if categorical else "real")
    return Dataset(
        x=np.array(xs),
        y=np.array(ys if categorical else parsed, dtype=object if categorical else float),
        z=np.array(zs, dtype=float),
        categorical=categorical,
    )


def load_rides_csv(path, strict: bool = True) -> tuple[list[RideRecord], LoadReport]:
    """Parse a ride file. With ``strict=False`` bad rows are skipped and reported."""
    header, rows = _read(path)
    missing = [c for c in RIDE_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    col = {c: header.index(c) for c in RIDE_COLUMNS}
    out, rejected = [], []
    for line, row in rows:
        try:
            if len(row) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            try:
                rec = RideRecord(
                    duration_x=_parse_float(row[col["duration_s"]], "duration_s", line),
                    route=row[col["route"]].strip(),
                    time_of_day=_parse_float(row[col["time_min"]], "time_min", line),
                    response_y=_maybe_float(row[col["y"]].strip()),
                )
            except DomainError as exc:
                raise DataError(f"line {line}: {exc}") from None
        except DataError as exc:
            if strict:
                raise
            rejected.append((line, str(exc)))
            continue
        out.append(rec)
    if not out:
        raise DataError(f"{path}: no valid rows")
    return out, LoadReport(rows=len(out), rejected=rejected)


def load_csv(path, schema: str | None = None):
    """Load a dataset file (-> Dataset) or a ride file (-> list of RideRecord)."""
    schema = schema or sniff_schema(path)
    if schema == "rides":
        return load_rides_csv(path)[0]
    if schema == "dataset":
        return load_dataset_csv(path)
    raise DataError(f"unknown schema {schema!r}")


def write_dataset_csv(path, dataset: Dataset) -> None:
    z = np.asarray(dataset.z, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"] + [f"z{k}" for k in range(1, z.shape[1] + 1)])
        for xi, yi, zi in zip(dataset.x, dataset.y, z):
            w.writerow([repr(float(xi)), yi if dataset.categorical else repr(float(yi))] + [repr(float(v)) for v in zi])


def write_rides_csv(path, records: Sequence[RideRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RIDE_COLUMNS)
        for r in records:
            w.writerow([repr(r.duration_x), r.route, repr(r.time_of_day), r.response_y])
