import numpy as np
import pytest

from unilion.gradcheck import random_sparse

_ACCEPTANCE: dict[int, str] = {}


class AcceptanceLog:
    def record(self, number: int, title: str, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE[number] = f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        print(_ACCEPTANCE[number])


@pytest.fixture
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_sparse():
    return random_sparse
