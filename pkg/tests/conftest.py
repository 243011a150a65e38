import numpy as np
import pytest

from cptkit.model import ConditionalModel, GaussianLinearModel


@pytest.fixture()
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture()
def unit_model():
    """N(z, 1) on a scalar covariate: the model used by most hand-computed examples."""
    return GaussianLinearModel(b=[1.0], sigma2=1.0)


class TiltedModel(ConditionalModel):
    """q1(x|z) = q(x|z) h(x) c(z) with log h, log c given as callables; test-only."""

    def __init__(self, base, log_h, log_c):
        self.base, self.log_h, self.log_c = base, log_h, log_c

    def rows(self, z):
        return self.base.rows(z)

    def n_rows(self, rows):
        return self.base.n_rows(rows)

    def logpdf(self, x, z):
        x = np.asarray(x, dtype=float)
        rows = self.base.rows(z)
        return self.base.logpdf(x, z) + self.log_h(x) + self.log_c(rows)

    def loglik_matrix(self, x, z):
        x = np.asarray(x, dtype=float)
        rows = self.base.rows(z)
        return self.base.loglik_matrix(x, z) + self.log_h(x)[None, :] + self.log_c(rows)[:, None]


@pytest.fixture()
def tilted():
    return TiltedModel


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
