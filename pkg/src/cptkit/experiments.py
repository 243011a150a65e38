"""Config-driven simulation suites comparing the CPT and CRT.

Families
--------
quadratic, cubic, tanh
    Null holds; X|Z ~ N(mu(Z), 1) with a nonlinear mean while the tests assume
    N(b'Z, 1). Grid: misspecification theta.
unlabeled
    Null holds; b is estimated by least squares on an independent unlabeled
    sample. Grid: unlabeled size N.
reuse
    Null holds; b is estimated on the test data itself. Grid: sample size n.
power
    Y|X,Z ~ N(a'Z + cX, 1), model correct. Grid: signal c.
trace
    Mixing traces of the pairwise chain on one data set.
worst_case
    CRT with the adversarial indicator statistic on a discrete toy model.

Every random draw is keyed by (master seed, purpose, family, grid index,
trial index), so results do not depend on thread count or execution order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from cptkit import streams
from cptkit.data import UnlabeledSet, fit_gaussian_linear
from cptkit.diagnostics import ChainTrace, chain_trace, product_tv_discrete
from cptkit.errors import DataError, PreconditionError
from cptkit.inference import Dataset, Statistic, p_value, rejection_stderr, run_cpt_test, run_crt_test
from cptkit.model import DiscreteTabularModel, GaussianLinearModel, _GaussianModel
from cptkit.sampler import ChainConfig

FAMILIES = ("quadratic", "cubic", "tanh", "unlabeled", "reuse", "power", "trace", "worst_case")
NULL_FAMILIES = ("quadratic", "cubic", "tanh", "unlabeled", "reuse")
MEAN_FAMILIES = ("quadratic", "cubic", "tanh")
METHODS = ("CPT", "CRT")
TANH_SERIES_BELOW = 1e-6


@dataclass
class ExperimentConfig:
    family: str
    grid: list[float] = field(default_factory=lambda: [0.0])
    n: int = 50
    p: int = 20
    trials: int = 1000
    alpha: float = 0.05
    steps_S: int = 50
    copies_M: int = 100
    seed: int = 0
    statistic: str = "abs_corr"
    methods: tuple[str, ...] = METHODS
    fixed_params: bool = False
    # trace family
    chains: int = 20
    trace_steps: int = 250
    # worst_case family
    p_star: float = 0.9
    p_hat: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        self.grid = [float(g) for g in self.grid]
        self.methods = tuple(self.methods)
        if not self.grid:
            raise DataError("grid must be nonempty")
        if self.trials < 1:
            raise DataError("trials must be >= 1")
        if not 0 < self.alpha < 1:
            raise DataError("alpha must lie in (0, 1)")
        if set(self.methods) - set(METHODS) or not self.methods:
            raise DataError(f"methods must be a nonempty subset of {METHODS}")
        if self.family in ("unlabeled", "reuse") and any(g != int(g) or g < 1 for g in self.grid):
            raise DataError(f"{self.family} grid holds sample sizes (positive integers)")
        # validates S and M
        self.chain

    @property
    def chain(self) -> ChainConfig:
        return ChainConfig(steps_S=self.steps_S, copies_M=self.copies_M, seed=self.seed)

    @property
    def family_index(self) -> int:
        return FAMILIES.index(self.family)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise DataError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise DataError(f"unknown config keys: {sorted(extra)}")
        if "family" not in doc:
            raise DataError("config needs a 'family'")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise DataError(f"bad config: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- data generation -------------------------------------------------------------------


def nonlinear_mean(family: str, u, theta: float) -> np.ndarray:
    """mu as a function of the linear index u = b'z."""
    u = np.asarray(u, dtype=float)
    if family == "quadratic":
        return u + theta * u**2
    if family == "cubic":
        return u - theta * u**3
    if family == "tanh":
        if theta < TANH_SERIES_BELOW:
            return u - theta**2 * u**3 / 3.0
        return np.tanh(theta * u) / theta
    raise PreconditionError(f"no nonlinear mean for family {family!r}")


@dataclass(frozen=True, eq=False)
class NonlinearGaussianModel(_GaussianModel):
    """N(mu(b'z), sigma2) with one of the quadratic/cubic/tanh mean maps; the simulated truth."""

    family: str
    b: np.ndarray
    theta: float
    sigma2: float = 1.0

    kind = "nonlinear_gaussian"

    def rows(self, z):
        z = np.asarray(z, dtype=float)
        return z[:, None] if z.ndim == 1 else z

    def n_rows(self, rows):
        return rows.shape[0]

    def moments(self, rows):
        mu = nonlinear_mean(self.family, rows @ np.asarray(self.b), self.theta)
        return mu, np.full_like(mu, self.sigma2)

    def to_dict(self):
        return {"kind": self.kind, "family": self.family, "b": list(map(float, self.b)),
                "theta": self.theta, "sigma2": self.sigma2}


def _coefficients(config: ExperimentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if config.fixed_params:
        rng = streams.substream(config.seed, streams.DATA, config.family_index)
    a = rng.standard_normal(config.p)
    b = rng.standard_normal(config.p)
    return a, b


def gen_null_data(
    config: ExperimentConfig, value: float, rng: np.random.Generator
) -> tuple[Dataset, _GaussianModel, GaussianLinearModel]:
    """One null trial: returns (data, true model Q*, model Q handed to the tests).

    ``value`` is theta for the mean families, N for ``unlabeled`` and n for
    ``reuse``.
    """
    if config.family not in NULL_FAMILIES:
        raise PreconditionError(f"family {config.family!r} is not a null design")
    a, b = _coefficients(config, rng)
    n = int(value) if config.family == "reuse" else config.n
    Z = rng.standard_normal((n, config.p))
    if config.family in MEAN_FAMILIES:
        truth: _GaussianModel = NonlinearGaussianModel(config.family, b, float(value))
    else:
        truth = GaussianLinearModel(b=b, sigma2=1.0)
    X = truth.mean(Z) + rng.standard_normal(n)
    Y = Z @ a / config.p + rng.standard_normal(n)
    if config.family in MEAN_FAMILIES:
        assumed = GaussianLinearModel(b=b, sigma2=1.0)
    elif config.family == "unlabeled":
        N = int(value)
        Zu = rng.standard_normal((N, config.p))
        Xu = Zu @ b + rng.standard_normal(N)
        assumed = GaussianLinearModel(b=fit_gaussian_linear(UnlabeledSet(Xu, Zu)).b, sigma2=1.0)
    else:
        assumed = GaussianLinearModel(b=fit_gaussian_linear(UnlabeledSet(X, Z)).b, sigma2=1.0)
    return Dataset(x=X, y=Y, z=Z), truth, assumed


def gen_alt_data(config: ExperimentConfig, c: float, rng: np.random.Generator) -> tuple[Dataset, GaussianLinearModel]:
    """X|Z ~ N(b'Z, 1) (model correct), Y|X,Z ~ N(a'Z + cX, 1)."""
    if config.family not in ("power", "trace"):
        raise PreconditionError(f"family {config.family!r} is not an alternative design")
    a, b = _coefficients(config, rng)
    Z = rng.standard_normal((config.n, config.p))
    model = GaussianLinearModel(b=b, sigma2=1.0)
    X = Z @ b + rng.standard_normal(config.n)
    Y = Z @ a + c * X + rng.standard_normal(config.n)
    return Dataset(x=X, y=Y, z=Z), model


# -- suites ----------------------------------------------------------------------------


@dataclass
class SuiteRow:
    grid_value: float
    method: str
    rejection_rate: float
    stderr: float
    trials: int


@dataclass
class SuiteResult:
    config: ExperimentConfig
    rows: list[SuiteRow]
    pvalues: dict[tuple[int, str], list[float]]
    errors: list[tuple[int, int, str]] = field(default_factory=list)

    def rate(self, grid_value: float, method: str) -> SuiteRow:
        for r in self.rows:
            if r.grid_value == grid_value and r.method == method:
                return r
        raise KeyError((grid_value, method))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid_value", "method", "rejection_rate", "stderr", "trials"])
            for r in self.rows:
                w.writerow([repr(r.grid_value), r.method, repr(r.rejection_rate), repr(r.stderr), r.trials])

    def write_pvalues_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid_value", "trial", "method", "p_value"])
            for (g, method), ps in sorted(self.pvalues.items()):
                for t, pv in enumerate(ps):
                    w.writerow([repr(self.config.grid[g]), t, method, "" if math.isnan(pv) else repr(pv)])


def _trial(config: ExperimentConfig, g: int, t: int) -> dict[str, float]:
    f = config.family_index
    rng = streams.substream(config.seed, streams.TRIAL, f, g, t)
    value = config.grid[g]
    reused = config.family == "reuse"
    if config.family == "power":
        data, model = gen_alt_data(config, value, rng)
    else:
        data, _, model = gen_null_data(config, value, rng)
    stat = Statistic(config.statistic, None if config.statistic == "abs_corr" else model)
    out = {}
    if "CPT" in config.methods:
        chain = ChainConfig(config.steps_S, config.copies_M, streams.derive_seed(config.seed, streams.CPT_TEST, f, g, t))
        out["CPT"] = run_cpt_test(data, model, stat, chain, model_fitted_on_test_data=reused).p_value
    if "CRT" in config.methods:
        seed = streams.derive_seed(config.seed, streams.CRT_TEST, f, g, t)
        out["CRT"] = run_crt_test(data, model, stat, config.copies_M, seed, model_fitted_on_test_data=reused).p_value
    return out


def run_suite(
    config: ExperimentConfig,
    threads: int | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> SuiteResult:
    """Rejection rates at level alpha for each grid value and method.

    A trial that raises is logged in ``errors`` and excluded from its grid
    point's tally; the other trials still count.
    """
    if config.family not in NULL_FAMILIES + ("power",):
        raise PreconditionError(f"run_suite does not handle family {config.family!r}")
    jobs = [(g, t) for g in range(len(config.grid)) for t in range(config.trials)]

    def job(gt):
        g, t = gt
        try:
            return _trial(config, g, t), None
        except Exception as exc:  # noqa: BLE001 - recorded per trial
            return None, f"{type(exc).__name__}: {exc}"

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = []
        for k, gt in enumerate(jobs):
            results.append(job(gt))
            if progress:
                progress(k + 1, len(jobs))

    pvalues: dict[tuple[int, str], list[float]] = {
        (g, m): [] for g in range(len(config.grid)) for m in config.methods
    }
    errors = []
    for (g, t), (res, err) in zip(jobs, results):
        for m in config.methods:
            pvalues[(g, m)].append(math.nan if res is None else res[m])
        if err is not None:
            errors.append((g, t, err))
    rows = []
    for g, value in enumerate(config.grid):
        for m in config.methods:
            ps = np.array(pvalues[(g, m)])
            ok = ps[~np.isnan(ps)]
            k = len(ok)
            rate = float(np.mean(ok <= config.alpha)) if k else math.nan
            rows.append(SuiteRow(value, m, rate, rejection_stderr(rate, k) if k else math.nan, k))
    return SuiteResult(config, rows, pvalues, errors)


def unlabeled_and_reuse_suites(config: ExperimentConfig, threads: int | None = None) -> SuiteResult:
    if config.family not in ("unlabeled", "reuse"):
        raise PreconditionError("expected family 'unlabeled' or 'reuse'")
    return run_suite(config, threads=threads)


# -- worst case ------------------------------------------------------------------------


def worst_case_crt_experiment(
    n: int,
    M: int,
    model_star: DiscreteTabularModel,
    model_hat: DiscreteTabularModel,
    trials: int,
    rng: np.random.Generator,
    z_labels: list | None = None,
    lower_constant: float = 2.5,
) -> dict[str, Any]:
    """CRT with the indicator statistic 1{X in A(Z)} at level alpha0 + 0.5 sqrt(log M / M).

    A(Z) is the event where the true product law exceeds the assumed one and
    alpha0 its mass under the assumed law. Reports the empirical excess error
    next to the lower bound d_TV - lower_constant * sqrt(log M / M) and the
    upper bound d_TV + 3 SE.
    """
    if M < 2:
        raise PreconditionError("M must be >= 2")
    if z_labels is None:
        z_labels = [next(iter(model_star._labels))] * n
    if len(z_labels) != n:
        raise PreconditionError("need one covariate label per observation")
    ptv = product_tv_discrete(model_star, model_hat, z_labels)
    k = len(model_star.support)
    radix = k ** np.arange(n)[::-1]
    alpha0 = float(ptv.prob_hat[ptv.event].sum())
    slack = math.sqrt(math.log(M) / M)
    alpha = alpha0 + 0.5 * slack

    def in_event(X: np.ndarray) -> np.ndarray:
        codes = model_star.support_index(X) @ radix
        return ptv.event[codes]

    rejections = 0
    chunk = max(1, (1 << 22) // max(1, M * n))
    for start in range(0, trials, chunk):
        size = min(chunk, trials - start)
        T_obs = in_event(model_star.draw(z_labels, rng, size=size))
        T_copies = in_event(model_hat.draw(z_labels, rng, size=size * M)).reshape(size, M)
        for t_obs, t_cop in zip(T_obs, T_copies):
            rejections += p_value(float(t_obs), t_cop.astype(float)) <= alpha
    rate = rejections / trials
    se = rejection_stderr(rate, trials)
    excess = rate - alpha
    lower = ptv.tv - lower_constant * slack
    upper = ptv.tv + 3 * se
    return {
        "n": n,
        "M": M,
        "trials": trials,
        "tv": ptv.tv,
        "alpha0": alpha0,
        "alpha": alpha,
        "rejection_rate": rate,
        "excess": excess,
        "stderr": se,
        "lower_bound": lower,
        "upper_bound": upper,
        "lower_ok": bool(excess >= lower),
        "upper_ok": bool(excess <= upper),
    }


def bernoulli_model(p1: float) -> DiscreteTabularModel:
    return DiscreteTabularModel(support=[0.0, 1.0], probs={"z": [1.0 - p1, p1]})


def worst_case_from_config(config: ExperimentConfig) -> dict[str, Any]:
    rng = streams.substream(config.seed, streams.TRIAL, config.family_index)
    return worst_case_crt_experiment(
        config.n, config.copies_M, bernoulli_model(config.p_star), bernoulli_model(config.p_hat),
        config.trials, rng,
    )


# -- traces ----------------------------------------------------------------------------


def trace_experiment(config: ExperimentConfig) -> tuple[Dataset, GaussianLinearModel, list[ChainTrace]]:
    """One data set generated as in the power design (c from grid[0]), then
    ``config.chains`` independent pairwise chains from the observed assignment."""
    rng = streams.substream(config.seed, streams.TRIAL, config.family_index)
    data, model = gen_alt_data(config, config.grid[0], rng)
    traces = [
        chain_trace(data.x, data.z, model, config.trace_steps, streams.substream(config.seed, streams.TRACE, c))
        for c in range(config.chains)
    ]
    return data, model, traces
