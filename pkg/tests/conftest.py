import json
import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from stallann.graph_index import GraphIndex, IndexConfig  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FROZEN = os.path.join(os.path.dirname(__file__), "frozen", "oracle_values.json")


@pytest.fixture(scope="session")
def frozen():
    with open(FROZEN) as f:
        return json.load(f)


@pytest.fixture(scope="session")
def small_data():
    return np.random.default_rng(7).normal(size=(300, 8)).astype(np.float32)


@pytest.fixture(scope="session")
def small_index_master(small_data):
    return GraphIndex.build(small_data, IndexConfig(dim=8, R=8, L_build=24))


@pytest.fixture
def small_index(small_index_master):
    return small_index_master.clone()


# -- acceptance summary: one line per criterion ---------------------------------------
_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or not (rep.when == "call" or rep.failed):
        return
    number, title = m.args
    _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", getattr(item, "measured", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict, measured = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}" + (f"  [{measured}]" if measured else ""))
