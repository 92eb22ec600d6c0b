import numpy as np
import pytest

from elastoreg.network import Arch

SMALL = Arch(tnet_point=(16, 32), tnet_fc=(16,), encoder=(16, 32), trunk=(32, 16),
             hidden=16)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end check")


@pytest.fixture
def small_arch():
    return SMALL


@pytest.fixture
def cloud():
    def make(n, seed=0, scale=20.0):
        return np.random.default_rng(seed).normal(size=(n, 3)) * scale
    return make


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def criterion_report():
    """Collects one PASS/FAIL line per acceptance criterion, printed at the end."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
        _ACCEPTANCE.append(line)
        print(line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
