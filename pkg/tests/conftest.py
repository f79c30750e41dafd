import numpy as np
import pytest

from moetrim.analysis import build_calibration, collect_traces
from moetrim.engine import generate_random_model, toy_config, toy_shared_config


@pytest.fixture(scope="session")
def toy_model():
    return generate_random_model(toy_config(), seed=0)


@pytest.fixture(scope="session")
def shared_model():
    return generate_random_model(toy_shared_config(), seed=1)


@pytest.fixture(scope="session")
def calib():
    return build_calibration(8, 16, seed=11)


@pytest.fixture(scope="session")
def toy_traces(toy_model, calib):
    return collect_traces(toy_model, calib)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def accept():
    """Record one acceptance criterion's verdict and print its line."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE[number] = (title, ok, detail)
        print(_line(number, title, ok, detail))

    return record


def _line(number, title, ok, detail):
    return f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(_line(n, *ACCEPTANCE[n]))
