from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"

# acceptance lines collected during the run, echoed in the terminal summary
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def oracles():
    with np.load(DATA / "oracles.npz") as d:
        return {k: d[k] for k in d.files}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
