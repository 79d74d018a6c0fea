import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from wfkit.trace import Trace

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def random_trace(rng: np.random.Generator, n: int | None = None, span: float = 2.0) -> Trace:
    """A normalized trace with a mix of tiny and large gaps (and exact ties)."""
    n = int(rng.integers(0, 500)) if n is None else n
    if n == 0:
        return Trace(np.zeros(0), np.zeros(0, dtype=np.int8))
    gaps = rng.lognormal(np.log(span / max(n, 1)), 2.0, size=n)
    gaps[rng.random(n) < 0.05] = 0.0
    gaps[0] = 0.0
    times = np.cumsum(gaps)
    dirs = rng.choice(np.array([1, -1], dtype=np.int8), size=n)
    return Trace(times, dirs)


@st.composite
def traces(draw, max_cells: int = 60):
    """Hypothesis strategy for normalized traces with millisecond-ish gaps."""
    n = draw(st.integers(0, max_cells))
    gaps = draw(st.lists(st.floats(0.0, 0.5, allow_nan=False), min_size=n, max_size=n))
    dirs = draw(st.lists(st.sampled_from([1, -1]), min_size=n, max_size=n))
    times = np.cumsum(np.array(gaps, dtype=np.float64))
    if n:
        times -= times[0]
    return Trace(times, np.array(dirs, dtype=np.int8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
