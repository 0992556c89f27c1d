import time

import numpy as np
import pytest
import torch

from litevio.harness import protocols as P
from litevio.harness.config import load_config
from litevio.network import load_checkpoint

torch.set_num_threads(1)
DESK_SETUP_SECONDS = []   # data generation, training and proxies


def random_deltas(rng, n, rot=0.3, trans=2.0):
    phi = rng.uniform(-rot, rot, (n, 3))
    v = rng.uniform(-trans, trans, (n, 3))
    return np.hstack([phi, v])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The fixed-seed desk reference pipeline: data, two-stage training and proxies."""
    out = tmp_path_factory.mktemp("desk")
    cfg = load_config("desk")
    start = time.perf_counter()
    P.gen_data(cfg, out)
    P.train_model(cfg, out)
    P.build_proxies(cfg, out)
    DESK_SETUP_SECONDS.append(time.perf_counter() - start)
    return cfg, out


@pytest.fixture
def desk_model(desk_run):
    net, blob = load_checkpoint(desk_run[1] / "model.pt")
    return net


def run_cli(*args):
    from litevio.harness.cli import main
    return main([str(a) for a in args])


@pytest.fixture(scope="session")
def golden_run(tmp_path_factory):
    """The pinned golden pipeline driven through the command line."""
    out = tmp_path_factory.mktemp("golden")
    for cmd in ("gen-data", "train", "init-proxies", "adapt-online", "report"):
        assert run_cli(cmd, "--config", "golden", "--out", out) == 0
    return out


ACCEPTANCE_LINES = []   # (criterion number, line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
