import numpy as np
import pytest

from glintcache import build_pyramid, compress, generate_exemplar


@pytest.fixture(scope="session")
def iso256():
    return generate_exemplar("isotropic-noise", 256, seed=0)


@pytest.fixture(scope="session")
def pyramid256(iso256):
    return build_pyramid(iso256, workers=4)


@pytest.fixture(scope="session")
def store256(pyramid256):
    return compress(pyramid256, R=8, workers=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


@pytest.fixture(scope="session")
def report():
    """Record one pass/fail line per acceptance criterion."""
    def add(criterion, passed, detail):
        line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
