import numpy as np
import pytest

from fbmexpand.model import build_model

# (criterion id, passed, detail) recorded by the acceptance suite
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []

BASE_SETUP = {"hurst": 0.4, "t": 0.25, "sigma": 0.3, "x0": 10.0}


@pytest.fixture
def geometric():
    return build_model("geometric-1d")


@pytest.fixture
def geometric_drift():
    return build_model("geometric-1d-drift")


@pytest.fixture
def linear2d():
    return build_model("linear-2d")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}")
