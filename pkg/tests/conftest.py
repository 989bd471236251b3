import os

import pytest

ACCEPTANCE_LINES: list[str] = []


def mc_reps(default: int = 200) -> int:
    """Monte Carlo replications; ``AIWASH_MC_REPS`` overrides for quick local runs."""
    return int(os.environ.get("AIWASH_MC_REPS", default))


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
