import numpy as np
import pytest

from momentum_pca.oracles import RowSampler
from momentum_pca.spectral import benchmark_spectrum, generate_dataset


@pytest.fixture(scope="session")
def gap_dataset():
    """The d = 10, gap 0.1 benchmark with 10^5 rows."""
    return generate_dataset(benchmark_spectrum(), 100_000)


@pytest.fixture(scope="session")
def gap_oracle(gap_dataset):
    return RowSampler(gap_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s[1:3])):
            terminalreporter.write_line(line)
