import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from datr.datasets import gen_synthetic, synthetic_spec

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_domains():
    a = gen_synthetic(synthetic_spec("alpha", 3), 20, seed=1)
    b = gen_synthetic(synthetic_spec("beta", 5), 20, seed=2, motif_offset=3)
    return a, b


@pytest.fixture(scope="session")
def third_domain():
    return gen_synthetic(synthetic_spec("gamma", 4), 20, seed=3, motif_offset=2)
