import numpy as np
import pytest

from deelbo import nnet
from deelbo import variational as vi
from deelbo.lowrank_gaussian import LowRankCov


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def make_lowrank(rng, D, K):
    return LowRankCov(rng.uniform(0.5, 2.0, size=D), rng.standard_normal((D, K)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return nnet.ModelSpec(input_dim=3, hidden_sizes=(4,), repr_dim=3, num_classes=3)


@pytest.fixture
def tiny_batch(rng, tiny_spec):
    X = rng.standard_normal((10, tiny_spec.input_dim))
    y = rng.integers(0, tiny_spec.num_classes, size=10)
    return nnet.Batch(X, y)


@pytest.fixture(params=["l2zero", "l2sp", "ptyl"])
def any_prior(request, rng, tiny_spec):
    D = tiny_spec.D
    if request.param == "l2zero":
        return vi.BackbonePrior.l2zero(D, 0.8)
    if request.param == "l2sp":
        return vi.BackbonePrior.l2sp(0.3 * rng.standard_normal(D), 0.8)
    return vi.BackbonePrior.ptyl(0.3 * rng.standard_normal(D), make_lowrank(rng, D, 3), 0.8)


# ---------------------------------------------------------------- acceptance report

_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(criterion, ok, detail):
        _VERDICTS[criterion] = (bool(ok), detail)
        print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{criterion}: {detail}"

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call" and report.failed:
        name = marker.args[0]
        if name not in _VERDICTS:
            _VERDICTS[name] = (False, f"did not complete: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS):
        ok, detail = _VERDICTS[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")
