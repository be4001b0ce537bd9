import numpy as np
import pytest

from autoseg3d import kernels

_THRESHOLDS = ("MIN_ROW_FORWARD", "MIN_ROW_GRAD_INPUT", "MIN_ROW_GRAD_WEIGHT")
# "cython-vector" disables the small-row handoff so tiny test shapes still reach the vector kernels
_PARAMS = kernels.available() + (["cython-vector"] if "cython" in kernels.available() else [])


@pytest.fixture(params=_PARAMS)
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    name = request.param
    if name == "cython-vector":
        from autoseg3d.kernels import _ckernels
        for attr in _THRESHOLDS:
            monkeypatch.setattr(_ckernels, attr, 0)
        name = "cython"
    with kernels.use(name):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion: report(name, ok, detail)."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def emit(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
