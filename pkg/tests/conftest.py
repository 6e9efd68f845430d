import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Tiny generated dataset shared by pipeline, data and CLI tests."""
    from oflseg.config import GenParams
    from oflseg.synthetic import gen_synthetic

    gp = GenParams(seed=3, n_sequences=4, frames_per_sequence=4, train_frames_per_sequence=5,
                   size=32, radius_range=(4.0, 6.0))
    return gen_synthetic(gp, tmp_path_factory.mktemp("small") / "data")


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
