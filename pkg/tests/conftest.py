import pytest

from chanorm.numerics import make_rng

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_params(layer, rng, scale=0.3):
    """Push every bank of a layer or model away from its initial value."""
    for arr in layer.named_params().values():
        arr += scale * rng.normal(size=arr.shape)
    return layer
