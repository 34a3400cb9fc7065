import os

import pytest

ACCEPTANCE_RESULTS = {}


def record_acceptance(number, title, passed, detail=""):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return passed


@pytest.fixture
def acceptance():
    return record_acceptance


@pytest.fixture(autouse=True)
def _reproducible_timestamps(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", os.environ.get("SOURCE_DATE_EPOCH", "0"))
    monkeypatch.delenv("LATENCY_ATLAS_CONFIG", raising=False)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
