import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from ftwt.network import Architecture, BlockSpec, build_network

SEEDS = [0, 1, 2, 3, 4]


def tiny_arch(channels=(3, 4, 5), input_shape=(2, 8, 8), pools=("max2", "none", "none"),
              hidden=(), num_classes=3):
    blocks = tuple(BlockSpec(c, pool=p) for c, p in zip(channels, pools))
    return Architecture("tiny", input_shape, blocks, num_classes=num_classes, hidden=hidden)


def as_float64(net):
    net.params = {k: v.astype(np.float64) for k, v in net.params.items()}
    return net


def random_bn_stats(net, rng):
    for b in range(1, net.arch.num_blocks + 1):
        c = net.arch.channels(b)
        net.params[f"bn.{b}.gamma"] = rng.uniform(0.5, 1.5, c).astype(net.params[f"bn.{b}.gamma"].dtype)
        net.params[f"bn.{b}.beta"] = rng.normal(0, 0.2, c).astype(net.params[f"bn.{b}.beta"].dtype)
        net.params[f"bn.{b}.running_mean"] = rng.normal(0, 0.3, c).astype(np.float32)
        net.params[f"bn.{b}.running_var"] = rng.uniform(0.5, 2.0, c).astype(np.float32)
    return net


@pytest.fixture
def tiny_net():
    return build_network(tiny_arch(), seed=0)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    pytest.importorskip("mlxtend")
    from ftwt.data import export_bundled_mnist
    out = tmp_path_factory.mktemp("mnist")
    export_bundled_mnist(out)
    return out


# filled by test_acceptance.py, echoed at the end of the run even when output is captured
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
