import math

import numpy as np
import pytest

from diffractlab.gibbs import ising_potential, sample_bernoulli, sample_gibbs
from diffractlab.pointset import fibonacci_scheme, generate_lattice_patch, generate_model_set_patch

TAU = (1 + math.sqrt(5)) / 2


def ising_oracle(beta: float, zmax: int) -> np.ndarray:
    """Two-point function of the zero-field chain from its transfer matrix.

    ``<s_0 s_z> = (lambda_-/lambda_+)^|z|`` with the eigenvalues of
    ``[[e^b, e^-b], [e^-b, e^b]]``.
    """
    t = np.array([[math.exp(beta), math.exp(-beta)], [math.exp(-beta), math.exp(beta)]])
    lo, hi = np.linalg.eigvalsh(t)
    return (lo / hi) ** np.arange(zmax + 1)


@pytest.fixture(scope="session")
def z_patch():
    return generate_lattice_patch([1], 2048)


@pytest.fixture(scope="session")
def ising_samples(z_patch):
    pot = ising_potential(0.1)
    return pot, sample_gibbs(z_patch, pot, sweeps=2000, burn_in=1000, thinning=10, seed=11)


@pytest.fixture(scope="session")
def bernoulli_samples(z_patch):
    return sample_bernoulli(z_patch, [0.5, 0.5], 256, seed=3)


@pytest.fixture(scope="session")
def fib500():
    return generate_model_set_patch(fibonacci_scheme(), 500)


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
