import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def central_diff(f, x, direction, eps=1e-6):
    """Directional derivative of scalar ``f`` at ``x`` by central differences."""
    return (f(x + eps * direction) - f(x - eps * direction)) / (2 * eps)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


# criterion number -> (verdict, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abc")), k)):
        verdict, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {verdict}  {detail}")
