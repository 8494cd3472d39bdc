import numpy as np
import pytest

from fliplab import nn

# filled by tests/test_acceptance.py; printed once at the end of the session
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[key] = f"{'PASS' if passed else 'FAIL'}  criterion {key}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.rstrip("abc")), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_store(*arrays, roles=None):
    """ParameterStore of loose arrays, one layer per array (weights unless told otherwise)."""
    roles = roles or ["weight"] * len(arrays)
    groups = [nn.ParamGroup(f"{i}.t.{r}", r, i, np.asarray(a, dtype=np.float64).copy())
              for i, (a, r) in enumerate(zip(arrays, roles))]
    return nn.ParameterStore(groups, [np.zeros_like(g.value) for g in groups])
