import numpy as np
import pytest
import torch

from dwpseg import data
from dwpseg.architectures import NetworkSpec, VARIATIONAL, build_unet


@pytest.fixture
def toy_spec():
    return NetworkSpec.toy()


@pytest.fixture
def toy_net(toy_spec):
    return build_unet(toy_spec, generator=torch.Generator().manual_seed(0))


@pytest.fixture
def toy_var_net():
    return build_unet(NetworkSpec.toy(mode=VARIATIONAL), generator=torch.Generator().manual_seed(0))


@pytest.fixture(scope="session")
def blob_volumes():
    return [data.preprocess(v) for v in data.generate("tumor-like", 6, seed=123)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
