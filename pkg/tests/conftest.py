import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from retrinav.embedstore import EmbeddingRecord, EmbeddingStore  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def unit_vectors(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_store(vectors, scene="s", first_id=0, dim=None):
    vectors = np.asarray(vectors, dtype=np.float64)
    store = EmbeddingStore(dim or vectors.shape[1])
    store.add_records(EmbeddingRecord(first_id + i, v, scene) for i, v in enumerate(vectors))
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance summary ------------------------------------------------------

_criteria: dict[int, str] = {}
_members: dict[int, list[str]] = {}
_outcomes: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria[number] = title
            _members.setdefault(number, []).append(item.nodeid)


def pytest_runtest_logreport(report):
    if report.failed:
        _outcomes[report.nodeid] = "failed"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(report.nodeid, "passed")
    elif report.skipped:
        _outcomes.setdefault(report.nodeid, "skipped")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        states = [_outcomes.get(n, "not run") for n in _members[number]]
        if all(s == "passed" for s in states):
            verdict = "PASS"
        elif any(s == "failed" for s in states):
            verdict = "FAIL"
        else:
            verdict = "NOT RUN"
        terminalreporter.write_line(f"{verdict:<7} [{number:2d}] {_criteria[number]}")
