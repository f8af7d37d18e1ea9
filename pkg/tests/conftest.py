"""Shared, cached phantom registrations.

Full 32^3 registrations take tens of seconds each, so reports are computed at
most once per session and shared between the engine and acceptance tests.
"""
import time

import pytest

from discoreg.data.phantom import contraction_phantom, shift_phantom, sliding_phantom
from discoreg.engine import RegistrationProblem, register
from discoreg.losses import LossWeights

MAKERS = {"shift": shift_phantom, "sliding": sliding_phantom, "contraction": contraction_phantom}


class Runs:
    def __init__(self):
        self._pairs = {}
        self._reports = {}
        self.seconds = {}

    def pair(self, kind, seed=0):
        key = (kind, seed)
        if key not in self._pairs:
            self._pairs[key] = MAKERS[kind](seed=seed)
        return self._pairs[key]

    def report(self, kind, seed=0, mode="discontinuous", reg=0.01):
        key = (kind, seed, mode, reg)
        if key not in self._reports:
            p = self.pair(kind, seed)
            problem = RegistrationProblem(
                p.moving, p.fixed, p.moving_mask, p.fixed_mask,
                weights=LossWeights(reg=reg), mode=mode, seed=seed, log_every=0,
            )
            t0 = time.perf_counter()
            self._reports[key] = register(problem)
            self.seconds[key] = time.perf_counter() - t0
        return self._reports[key]


@pytest.fixture(scope="session")
def runs():
    return Runs()


# one verdict line per acceptance criterion, printed after the run
VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str) -> bool:
        VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(VERDICTS[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
