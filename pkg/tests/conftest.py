import numpy as np
import pytest
from hypothesis import settings

from moire_lab.continuum import make_params
from moire_lab.geometry import make_lattice, reciprocal_data
from moire_lab.hopping import InterlayerModel, IntralayerModel

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def spec():
    return make_lattice()


@pytest.fixture(scope="session")
def rec(spec):
    return reciprocal_data(spec)


@pytest.fixture(scope="session")
def params(spec):
    return make_params(spec, IntralayerModel(), InterlayerModel())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; the lines are echoed at the end."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        lines.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s[6:]):
            terminalreporter.write_line(line)
