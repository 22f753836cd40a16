"""Shared fixtures plus the acceptance-criteria summary hook.

Acceptance tests record one line per criterion through record_acceptance;
the terminal summary prints them as PASS/FAIL lines after the test run.
"""

from __future__ import annotations

import numpy as np
import pytest

from triquant import LabeledDataset

ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(number: int, description: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = (description, ok, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        description, ok, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number}: {status} - {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


def make_labeled(features: np.ndarray, cluster_of: list[int]) -> LabeledDataset:
    labels = [frozenset([c]) for c in cluster_of]
    ids = [f"item-{i:06d}" for i in range(len(cluster_of))]
    return LabeledDataset(np.asarray(features, dtype=np.float64), labels, ids)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
