import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def f64():
    """Run a test with float64 as the torch default dtype."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report

_CALL_REPORT = pytest.StashKey[pytest.TestReport]()
_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.stash[_CALL_REPORT] = rep


@pytest.fixture
def measured(request):
    """Dict a criterion test fills with its measured values; reported on teardown."""
    values: dict = {}
    yield values
    marker = request.node.get_closest_marker("criterion")
    if marker is None:
        return
    number, name = marker.args
    rep = request.node.stash.get(_CALL_REPORT, None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    detail = ", ".join(f"{k}={_fmt(v)}" for k, v in values.items())
    line = f"ACCEPT {number:>2} {status} {name}" + (f": {detail}" if detail else "")
    request.config.stash[_LINES].append((number, line))
    print("\n" + line)


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
