import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedprok.nn import ModelParams, init_params  # noqa: E402


@pytest.fixture
def small_net():
    return init_params(5, [7], 4, 3, seed=0)


def random_params(rng, widths, num_classes, scale=1.0):
    layers = [(rng.normal(0, scale, (o, i)), rng.normal(0, scale, o)) for i, o in zip(widths[:-1], widths[1:])]
    head = (rng.normal(0, scale, (num_classes, widths[-1])), rng.normal(0, scale, num_classes))
    return ModelParams(tuple(layers), head)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
