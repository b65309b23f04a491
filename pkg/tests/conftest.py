from __future__ import annotations

import numpy as np
import pytest

from egopose.codebook import build_codebook
from egopose.synthdata import SynthConfig, synthesize

_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bundle():
    return synthesize(SynthConfig(num_sequences=4, num_test=1, frames_per_sequence=128, seed=3))


@pytest.fixture(scope="session")
def small_dataset(small_bundle):
    return small_bundle.dataset


@pytest.fixture(scope="session")
def small_codebook(small_dataset):
    gt = np.concatenate([s.gt for s in small_dataset.split("train")])
    return build_codebook(gt, small_dataset.layout, K_upp=8, K_bot=4, seed=0, n_init=5)


def pytest_runtest_logreport(report):
    marker = report.__dict__.get("criterion")
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "seen": False})
    if report.when == "call" or report.outcome != "passed":
        entry["seen"] = True
        entry["passed"] = entry["passed"] and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["passed"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}")
