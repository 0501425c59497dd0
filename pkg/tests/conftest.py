import numpy as np
import pytest

from hivt5.tensor import make_rng


def numeric_grad(f, x: np.ndarray, step: float = 1e-5, coords=None) -> dict:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated in place)."""
    if coords is None:
        coords = list(np.ndindex(x.shape))
    out = {}
    for c in coords:
        old = x[c]
        x[c] = old + step
        hi = f()
        x[c] = old - step
        lo = f()
        x[c] = old
        out[c] = (hi - lo) / (2 * step)
    return out


def rel_err(a, b) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.fixture
def rng():
    return make_rng(1234)


# -- acceptance bookkeeping -----------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
