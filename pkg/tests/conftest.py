from __future__ import annotations

import pytest

from enclave_pcc.bundle import Policy, PolicyManifest
from enclave_pcc.loader import LayoutConfig, build_layout

ALL = Policy.parse("p1,p2,p3,p4,p5,p6")
P1_P5 = Policy.parse("p1,p2,p3,p4,p5")


@pytest.fixture(scope="session")
def layout():
    return build_layout()


@pytest.fixture(scope="session")
def small_layout():
    # a 16-page stack keeps stack-exhaustion runs short
    return build_layout(LayoutConfig(stack_size=16 * 4096))


@pytest.fixture
def full_manifest():
    return PolicyManifest(ALL)


_CRITERIA: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        note = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"criterion {self.number} {verdict}: {self.title} ({note})"
        _CRITERIA.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    """Context manager that records one pass/fail line per acceptance criterion."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
