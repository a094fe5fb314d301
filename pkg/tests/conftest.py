from __future__ import annotations

import functools

import pytest

from qrlab.geometry import EinsteinProduct, RoundSphere, build_background

ACCEPTANCE: list[tuple[str, bool, str]] = []


@functools.lru_cache(maxsize=None)
def background(n: int, N: int = 128, L: int = 48, product: tuple[int, int] | None = None):
    kind = RoundSphere() if product is None else EinsteinProduct(*product)
    return build_background(n, kind, N, L)


@pytest.fixture
def bg():
    return background


def record(criterion: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
