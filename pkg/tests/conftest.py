import numpy as np
import pytest

from groupdrl.data import SourceGroup, TargetSample

CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_groups(L=3, n=120, p=3, seed=0, shift=0.0, noise=0.5):
    """Small linear-model fixture with distinct slopes per group."""
    r = np.random.default_rng(seed)
    groups = []
    for l in range(L):
        X = r.standard_normal((n, p))
        beta = r.standard_normal(p)
        groups.append(SourceGroup(l, X, X @ beta + noise * r.standard_normal(n), label=l + 1))
    target = TargetSample(shift + r.standard_normal((2 * n, p)))
    return groups, target
