import numpy as np
import pytest


def random_density_matrix(dim, rng, rank=None, support=None):
    """Random mixed state; ``support`` confines it to the lowest levels."""
    support = support or dim
    rank = rank or support
    g = rng.standard_normal((support, rank)) + 1j * rng.standard_normal((support, rank))
    small = g @ g.conj().T
    rho = np.zeros((dim, dim), dtype=complex)
    rho[:support, :support] = small / np.trace(small).real
    return rho


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_lines():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
