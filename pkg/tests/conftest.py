import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from kamknob.series import FourierTaylor

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
# real root of s^3 = s + 1
SPIRAL = 1.324717957244746


def golden_type(n: int) -> list[float]:
    """Frequency vectors built from the golden and spiral means."""
    if n == 1:
        return [1.0]
    if n == 2:
        return [1.0, GOLDEN]
    return [1.0, 1.0 / SPIRAL, 1.0 / SPIRAL**2]


def random_series(rng, n, terms=6, max_deg=3, max_k=4, zero_average=False, scale=1.0):
    """Random real (Hermitian) sparse series with ``terms`` +/-k pairs."""
    out = []
    for _ in range(terms):
        m = rng.integers(0, max_deg + 1, size=n)
        while True:
            k = rng.integers(-max_k, max_k + 1, size=n)
            if not (zero_average and not k.any()):
                break
        c = complex(rng.normal(), rng.normal()) * scale
        if not k.any():
            c = c.real
        out.append((m.tolist(), k.tolist(), c))
    return FourierTaylor.real_terms(n, out)


@st.composite
def series_strategy(draw, n=None, terms=5, max_deg=3, max_k=4, zero_average=False):
    n = draw(st.integers(1, 3)) if n is None else n
    seed = draw(st.integers(0, 2**32 - 1))
    count = draw(st.integers(1, terms))
    rng = np.random.default_rng(seed)
    return random_series(rng, n, count, max_deg, max_k, zero_average)


# -- acceptance summary ------------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (title, bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        line = f"criterion {num} {'PASS' if ok else 'FAIL'}: {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
