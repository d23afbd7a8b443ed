import pytest

from rlvrloop.tasks import generate_synth_suite


@pytest.fixture(scope="session")
def small_suite():
    """Six 4x4 tasks; shared by tests that only need any valid suite."""
    return generate_synth_suite(6, 4, 4, seed=11)


@pytest.fixture(scope="session")
def one_task(small_suite):
    return small_suite.tasks[0]
