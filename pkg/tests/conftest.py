import numpy as np
import pytest

from mkv_neuro import build_partition, fig2_model
from mkv_neuro.dynamics import ToleranceConfig

ACCEPTANCE_LINES = []


def record_acceptance(num, name, ok, detail=""):
    line = f"criterion {num:2d} [{name}]: {'PASS' if ok else 'FAIL'}" \
           + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fig2():
    return fig2_model()


@pytest.fixture(scope="session")
def fig2_part(fig2):
    return build_partition(fig2)


@pytest.fixture(scope="session")
def ctrl():
    return ToleranceConfig()
