import numpy as np
import pytest

from shared_transfer.experiments import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_problem():
    """Small noiseless synthetic problem with shared covariates."""
    spec = SyntheticSpec(n=60, p=3, N=25, L=2, noise_sigma=0.0, test_n=30, seed=3,
                         num_functions=8)
    return generate_synthetic(spec)


ACCEPTANCE_LINES = []


def report(label: str, ok: bool, detail: str = "") -> None:
    """Record one acceptance verdict (printed in the terminal summary)."""
    line = f"{label}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
