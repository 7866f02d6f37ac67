import numpy as np
import pytest

from drbsde.paths import make_grid, simulate_brownian


@pytest.fixture(scope="session")
def small_ens():
    """4096 paths, 20 steps: enough for structural checks, cheap to solve."""
    return simulate_brownian(make_grid(1.0, 20), 1, 4096, seed=123)


@pytest.fixture(scope="session")
def ens_2d():
    return simulate_brownian(make_grid(1.0, 10), 2, 2048, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# --------------------------------------------------------------------------
# acceptance lines: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Log one check of ``criterion``; the criterion passes only if all its checks do."""
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"{status} criterion {k}: " + "; ".join(d for _, d in parts))
