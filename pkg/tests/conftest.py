import numpy as np
import pytest
import torch

from crossmatch.config import from_dict
from crossmatch.datasets import SynthSpec, synth_generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_records():
    return synth_generate(SynthSpec(count=24, height=32, width=32, seed=11))


@pytest.fixture
def tiny_config():
    return from_dict({
        "data": {"labeled_fraction": 0.25, "val_count": 4},
        "net": {"base_width": 8, "depth": 2},
        "train": {"iterations": 4, "batch_size": 4},
    })


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
