import numpy as np
import pytest
from hypothesis import settings


from gnshoot.bench import scalar_unstable
from gnshoot.solver import GNMS, ILQR, VariantConfig, solve

ACCEPTANCE_LINES: list[str] = []

# wall-clock deadlines are meaningless on a shared single-core runner
settings.register_profile("gnshoot", deadline=None)
settings.load_profile("gnshoot")


@pytest.fixture(scope="session", autouse=True)
def warm_jit():
    """Compile (or load from cache) the numba kernels before any timed section."""
    pb = scalar_unstable(N=20)
    for v in (ILQR, GNMS, VariantConfig(4, True)):
        solve(pb, v)


@pytest.fixture
def report():
    def emit(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + \
            (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
