from pathlib import Path

import numpy as np
import pytest

from hdesnet.model_io import init_weights, randomize_batchnorm
from hdesnet.net_builder import HdesConfig, build_hdesnet

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    n, title = marker
    failed = report.failed or (report.when == "call" and report.skipped)
    prev_ok = _criteria.get(n, (title, True))[1]
    _criteria[n] = (title, prev_ok and not failed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_net():
    """Original network at 64x64 with non-trivial batch-norm statistics."""
    g = build_hdesnet(HdesConfig(input_hw=(64, 64)))
    ws = randomize_batchnorm(g, init_weights(g, 0), 1)
    return g, ws


@pytest.fixture(scope="session")
def full_net():
    g = build_hdesnet()
    ws = randomize_batchnorm(g, init_weights(g, 0), 1)
    return g, ws
