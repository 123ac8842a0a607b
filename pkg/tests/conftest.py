import numpy as np
import pytest

from dhal_aim.geometry import standard_layout


@pytest.fixture(scope="session")
def layout():
    return standard_layout()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance():
    """``record(n, ok, detail)`` stores one verdict line per acceptance criterion."""

    def record(n, ok, detail):
        _ACCEPTANCE[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
