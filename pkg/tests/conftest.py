import os
import sys
import time

import numpy as np
import pytest

from palmtta import runner as rn

# runs must write where the fixtures say, not where the caller's env points
os.environ.pop("PALM_OUT", None)


@pytest.fixture(scope="session")
def out_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("palm_out")


@pytest.fixture(scope="session")
def source_training(out_dir):
    """Train the default source model once; returns (config, seconds spent)."""
    cfg = rn.RunConfig(out_dir=str(out_dir))
    t0 = time.perf_counter()
    rn.train_source_model(cfg)
    return cfg, time.perf_counter() - t0


@pytest.fixture(scope="session")
def base_cfg(source_training):
    """Default configuration with its source snapshot already trained."""
    return source_training[0]


@pytest.fixture(scope="session")
def workspace(base_cfg):
    return rn.Workspace()


@pytest.fixture(scope="session")
def source_net(base_cfg, workspace):
    net = rn.build_network(base_cfg)
    net.restore(workspace.source_snapshot(base_cfg))
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = results[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
