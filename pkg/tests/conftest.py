import time
import warnings
from contextlib import contextmanager

import numpy as np
import pytest

from iterlnl import IterConfig, LnlConfig, TrainConfig, run_iterlnl, train_source, wrap_as_blackbox
from iterlnl.datagen import adaptation_fixture

ACCEPTANCE_LINES = []


@contextmanager
def criterion(name, max_seconds=None):
    """Record one PASS/FAIL line for the acceptance summary; re-raises failures."""
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if max_seconds is not None:
            assert elapsed < max_seconds, f"{name}: took {elapsed:.1f}s, limit {max_seconds}s"
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            ACCEPTANCE_LINES.append(f"SKIP  {name}: {exc}")
        else:
            ACCEPTANCE_LINES.append(f"FAIL  {name}: {exc}".splitlines()[0])
        raise
    else:
        ACCEPTANCE_LINES.append(f"PASS  {name} ({elapsed:.2f}s)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class FixtureRuns:
    """Lazily computed, session-shared runs on the adaptation fixture."""

    def __init__(self):
        self.source, self.target = adaptation_fixture()
        self._cache = {}
        self.timings = {}

    def _get(self, key, fn):
        if key not in self._cache:
            start = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self._cache[key] = fn()
            self.timings[key] = time.perf_counter() - start
        return self._cache[key]

    @property
    def source_model(self):
        return self._get("source", lambda: train_source(self.source, TrainConfig(seed=0)))

    @property
    def handle(self):
        return wrap_as_blackbox(self.source_model)

    def run(self, steps=3, **lnl_flags):
        key = ("run", steps, tuple(sorted(lnl_flags.items())))
        cfg = IterConfig(steps=steps, lnl=LnlConfig(**lnl_flags), seed=0)
        return self._get(key, lambda: run_iterlnl(self.handle, self.target, cfg))


@pytest.fixture(scope="session")
def fixture_runs():
    return FixtureRuns()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
