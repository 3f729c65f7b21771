from __future__ import annotations

import numpy as np
import pytest

from chafee_ftle.spectral import BasisConvention, DomainSpec

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        _VERDICTS[number] = line
        with capsys.disabled():
            print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])


@pytest.fixture(scope="session")
def small_domain() -> DomainSpec:
    return DomainSpec(N=16)


@pytest.fixture(scope="session")
def dirichlet_domain() -> DomainSpec:
    return DomainSpec(L=np.pi, N=16, basis_convention=BasisConvention.STANDARD_DIRICHLET)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
