from __future__ import annotations

import threading

import pytest

from l1dcgrid import project
from l1dcgrid.config import bundled_path, load

ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture(scope="session")
def table1():
    return load(bundled_path("table1"))


@pytest.fixture(scope="session")
def esr_cfg():
    return load(bundled_path("esr"))


@pytest.fixture(scope="session")
def synth1(table1):
    return project.synthesize(table1)


class _Runs:
    """Memoised scenario runs so several tests can inspect one simulation."""

    def __init__(self):
        self._cache = {}
        self._lock = threading.Lock()

    def get(self, cfg, name, results):
        key = (id(cfg), name)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = project.run(cfg, name, results)
            return self._cache[key]


@pytest.fixture(scope="session")
def runs():
    return _Runs()
