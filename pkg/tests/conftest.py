import os
from pathlib import Path

import numpy as np
import pytest
import torch

from ygan import data as data_mod
from ygan import model

# keep hypothesis + torch from fighting over cores in CI-sized containers
torch.set_num_threads(max(1, os.cpu_count() or 1))

TINY_CONFIG = model.ModelConfig(image_size=32, channels=1, latent_dim=16,
                                num_classes=4, hidden_units=8, base_filters=8)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY_CONFIG


@pytest.fixture(scope="session")
def tiny_bundle():
    return model.build_networks(TINY_CONFIG, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def digit_corpus():
    """Small rendered-digit corpus shared by the slower integration tests."""
    return data_mod.make_synthetic_digits(count=600, image_size=32, seed=123)


def mnist_idx_dir():
    """Directory with real MNIST IDX files, if the user provided one."""
    candidates = []
    env = os.environ.get("YGAN_DATA_DIR")
    if env:
        candidates += [Path(env) / "mnist", Path(env)]
    candidates.append(Path(__file__).parent / "data" / "mnist")
    for root in candidates:
        if root.is_dir() and any(
            data_mod._idx_magic(p) == data_mod.IDX_IMAGES_MAGIC
            for p in root.iterdir() if p.is_file()
        ):
            return root
    return None


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, printed after the run."""
    lines = {}
    for status in ("passed", "failed", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion" in nodeid:
                name = nodeid.split("::", 1)[1]
                lines[name] = status.upper()
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name in sorted(lines):
            terminalreporter.write_line(f"{name}: {lines[name]}")
