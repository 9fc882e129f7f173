import contextlib

import numpy as np
import pytest

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class AcceptanceRecorder:
    """Collects one pass/fail line per acceptance criterion."""

    @contextlib.contextmanager
    def criterion(self, number: int, title: str):
        info = {"detail": ""}
        try:
            yield info
        except BaseException:
            _ACCEPTANCE[number] = (title, False, info["detail"])
            raise
        _ACCEPTANCE[number] = (title, True, info["detail"])


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
