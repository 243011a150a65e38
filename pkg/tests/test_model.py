import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from cptkit.errors import DataError, DomainError
from cptkit.model import (
    DiscreteTabularModel,
    GaussianLinearModel,
    KernelGaussianModel,
    circular_minutes,
    conditional_mean,
    log_density,
    model_from_dict,
    sample,
)


def test_gaussian_log_density_at_mean():
    m = GaussianLinearModel(b=[0.0], sigma2=1.0)
    assert log_density(m, 0.0, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert log_density(m, 0.0, [0.0]) == pytest.approx(-0.918938533, abs=1e-9)


@pytest.mark.parametrize("z", [-3.0, 0.0, 0.7, 12.5])
def test_gaussian_zero_residual(z):
    m = GaussianLinearModel(b=[1.0], sigma2=1.0)
    assert log_density(m, z, [z]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_gaussian_matches_scipy_logpdf(rng):
    b = rng.normal(size=3)
    m = GaussianLinearModel(b=b, sigma2=2.5)
    z = rng.normal(size=(20, 3))
    x = rng.normal(size=20)
    expect = stats.norm.logpdf(x, loc=z @ b, scale=math.sqrt(2.5))
    np.testing.assert_allclose(m.logpdf(x, z), expect, rtol=1e-13)
    L = m.loglik_matrix(x, z)
    np.testing.assert_allclose(L[4, 7], stats.norm.logpdf(x[7], loc=z[4] @ b, scale=math.sqrt(2.5)), rtol=1e-13)


def test_discrete_lookup():
    m = DiscreteTabularModel(support=[0.0, 1.0], probs={"z0": [0.25, 0.75]})
    assert log_density(m, 0.0, "z0") == pytest.approx(math.log(0.25), abs=1e-15)
    assert log_density(m, 0.5, "z0") == -math.inf


def test_conditional_means():
    assert conditional_mean(GaussianLinearModel(b=[1.0, 2.0]), [3.0, 4.0]) == 11.0
    k = KernelGaussianModel(groups={"r": ([300.0], [7.0])})
    assert conditional_mean(k, ("r", 300.0)) == 7.0
    d = DiscreteTabularModel(support=[0.0, 1.0], probs={"z": [0.3, 0.7]})
    assert conditional_mean(d, "z") == pytest.approx(0.7, abs=1e-15)


def test_degenerate_gaussian_sample(rng):
    m = GaussianLinearModel(b=[1.0, -2.0], sigma2=1e-30)
    z = [0.3, 1.1]
    assert abs(sample(m, z, rng) - (0.3 - 2.2)) < 1e-10


def test_gaussian_sample_mean(rng):
    m = GaussianLinearModel(b=[0.0], sigma2=1.0)
    draws = m.draw(np.zeros((1, 1)), rng, size=10**6)
    assert abs(draws.mean()) < 0.01


def test_point_mass_discrete(rng):
    m = DiscreteTabularModel(support=[-1.0, 3.0], probs={"a": [1.0, 0.0]})
    assert np.all(m.draw(["a"] * 100, rng) == -1.0)


def test_sampling_is_deterministic_given_stream():
    m = GaussianLinearModel(b=[1.0, 2.0], sigma2=0.5)
    z = [[0.1, 0.2], [1.0, -1.0]]
    a = m.draw(z, np.random.default_rng(5), size=3)
    b = m.draw(z, np.random.default_rng(5), size=3)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("b,s2,z", [([1.0], 1.0, [0.4]), ([0.5, -2.0], 0.3, [1.0, 2.0]), ([3.0], 9.0, [-1.0])])
def test_density_integrates_to_one(b, s2, z):
    m = GaussianLinearModel(b=b, sigma2=s2)
    mu, sd = conditional_mean(m, z), math.sqrt(s2)
    total, _ = integrate.quad(lambda x: math.exp(log_density(m, x, z)), mu - 10 * sd, mu + 10 * sd,
                              epsabs=1e-13, epsrel=1e-13, limit=200)
    assert abs(total - 1.0) < 1e-8


@pytest.mark.parametrize("b,s2,z", [([1.0], 1.0, [0.4]), ([0.5, -2.0], 0.3, [1.0, 2.0])])
def test_mean_matches_quadrature(b, s2, z):
    m = GaussianLinearModel(b=b, sigma2=s2)
    mu, sd = conditional_mean(m, z), math.sqrt(s2)
    first, _ = integrate.quad(lambda x: x * math.exp(log_density(m, x, z)), mu - 12 * sd, mu + 12 * sd,
                              epsabs=1e-13, epsrel=1e-13, limit=200)
    assert abs(first - mu) < 1e-6


def test_sample_histogram_matches_density(rng):
    m = GaussianLinearModel(b=[2.0], sigma2=0.7)
    z = [0.5]
    draws = m.draw([z], rng, size=10**5)[:, 0]
    mu, sd = conditional_mean(m, z), math.sqrt(0.7)
    edges = mu + sd * np.linspace(-3, 3, 25)
    edges = np.concatenate([[-np.inf], edges, [np.inf]])
    observed = np.histogram(draws, bins=edges)[0]
    expected = np.diff(stats.norm.cdf(edges, loc=mu, scale=sd)) * draws.size
    assert stats.chisquare(observed, expected).pvalue > 0.001


def test_discrete_sample_histogram(rng):
    m = DiscreteTabularModel(support=[0.0, 1.0, 5.0], probs={"a": [0.2, 0.5, 0.3]})
    draws = m.draw(["a"], rng, size=10**5)[:, 0]
    observed = [(draws == v).sum() for v in (0.0, 1.0, 5.0)]
    assert stats.chisquare(observed, np.array([0.2, 0.5, 0.3]) * 10**5).pvalue > 0.001


def test_dimension_mismatch():
    m = GaussianLinearModel(b=[1.0, 2.0])
    with pytest.raises(DomainError):
        log_density(m, 0.0, [1.0, 2.0, 3.0])


def test_kernel_unknown_route_and_zero_mass():
    k = KernelGaussianModel(groups={"r": ([0.0], [1.0])}, bandwidth_h=1.0)
    with pytest.raises(DomainError, match="unknown route"):
        log_density(k, 1.0, ("other", 0.0))
    # 720 minutes away at h=1 underflows to zero mass
    with pytest.raises(DomainError, match="zero kernel mass"):
        log_density(k, 1.0, ("r", 720.0))


def test_discrete_unknown_label():
    m = DiscreteTabularModel(support=[0.0, 1.0], probs={"a": [0.5, 0.5]})
    with pytest.raises(DomainError):
        conditional_mean(m, "b")


def test_invalid_parameters():
    with pytest.raises(DomainError):
        GaussianLinearModel(b=[1.0], sigma2=0.0)
    with pytest.raises(DomainError):
        GaussianLinearModel(b=[np.nan])
    with pytest.raises(DomainError):
        KernelGaussianModel(groups={}, bandwidth_h=0.0)
    with pytest.raises(DomainError):
        DiscreteTabularModel(support=[0.0, 1.0], probs={"a": [0.5, 0.6]})


def test_circular_time_distance():
    assert circular_minutes(23 * 60, 60) == 120.0
    assert circular_minutes(0, 720) == 720.0
    assert circular_minutes(10, 1430) == 20.0


def test_kernel_crosses_midnight():
    # training ride at 00:30; a query at 23:50 is 40 minutes away, not 23h20
    k = KernelGaussianModel(groups={"r": ([30.0], [5.0])}, bandwidth_h=20.0)
    assert k.effective_mass([("r", 1430.0)])[0] == pytest.approx(math.exp(-(40.0**2) / 800.0), rel=1e-14)


@pytest.mark.parametrize(
    "model",
    [
        GaussianLinearModel(b=[0.1, 1 / 3, -2.5e-7], sigma2=0.123456789),
        KernelGaussianModel(groups={"A->B": ([1.5, 1439.9], [600.0, 0.1]), "B->A": ([720.0], [1 / 3])},
                            bandwidth_h=20.0, variance_floor=1e-9),
        DiscreteTabularModel(support=[0.0, 0.1, 2.0], probs={"a": [0.1, 0.2, 0.7], 3: [1 / 3, 1 / 3, 1 / 3]}),
    ],
)
def test_json_round_trip(model):
    doc = json.loads(model.to_json())
    again = model_from_dict(doc)
    assert again.to_dict() == model.to_dict()
    assert json.loads(again.to_json()) == doc


def test_unknown_kind():
    with pytest.raises(DataError):
        model_from_dict({"kind": "mystery"})
    with pytest.raises(DataError):
        model_from_dict({"kind": "gaussian_linear"})
