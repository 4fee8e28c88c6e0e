import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def textured(h, w, c=1, seed=0):
    return np.random.default_rng(seed).random((h, w, c))


def block_constant(h, w, c=1, seed=0, block=32):
    tiles = np.random.default_rng(seed).random((h // block, w // block, c))
    return np.repeat(np.repeat(tiles, block, axis=0), block, axis=1)


def central_diff(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        up = f(x)
        x[i] = orig - eps
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# -- acceptance reporting: one line per criterion in the terminal summary

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    failed = report.failed
    if report.when == "call" or failed:
        prev = _criteria.get(n, (title, "PASS"))[1]
        _criteria[n] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {title}")
