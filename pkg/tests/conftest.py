import numpy as np
import pytest

from qpgamma.config import default_config
from qpgamma.electrostatics import load_or_build_table


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def table(cfg):
    # solved once per machine, then read from the on-disk cache
    return load_or_build_table(cfg.geometry)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# criterion number -> list of (part, passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[int, list] = {}


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}: {'ok' if ok else 'FAIL'} ({d})" for p, ok, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
