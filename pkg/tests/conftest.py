import numpy as np
import pytest

from qalaskit.signal_model import SequenceTiming, TissueParams


@pytest.fixture
def timing():
    return SequenceTiming()


def random_tissues(rng, n):
    """Physically plausible random draws spanning the dictionary ranges."""
    return TissueParams(
        t1_ms=rng.uniform(200.0, 5000.0, n),
        t2_ms=rng.uniform(20.0, 2500.0, n),
        pd=rng.uniform(0.3, 2.0, n),
        ie=rng.uniform(0.5, 1.0, n),
    )


def random_b1(rng, n):
    return rng.uniform(0.65, 1.35, n)


# one pass/fail line per acceptance criterion, printed after the run
_acceptance_results: list[tuple[str, str]] = []


def record_criterion(name: str, passed: bool) -> None:
    _acceptance_results.append((name, "PASS" if passed else "FAIL"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in _acceptance_results:
        terminalreporter.write_line(f"{verdict}  {name}")
