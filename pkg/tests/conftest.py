import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fect.synthgen import default_recipe, generate_dataset

settings.register_profile("fect", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fect")

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Sixteen 256 px samples, four per class."""
    root = tmp_path_factory.mktemp("small")
    return generate_dataset(default_recipe(samples_per_class=4, image_size=256, seed=1), root)
