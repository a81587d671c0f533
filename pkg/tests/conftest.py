import os
import warnings
from pathlib import Path

import pytest
import torch

from edclab.data import load_dataset
from edclab.models import build_ensemble
from edclab.stats import compute_or_load_stats

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cache_root(tmp_path_factory) -> Path:
    env = os.environ.get("EDC_TEST_CACHE")
    return Path(env) if env else tmp_path_factory.mktemp("edc_cache")


@pytest.fixture(scope="session")
def toy():
    return load_dataset("toy1d")


@pytest.fixture(scope="session")
def toy_ensemble(toy):
    return build_ensemble("identity", toy)


@pytest.fixture(scope="session")
def digits():
    return load_dataset("digits32")


@pytest.fixture(scope="session")
def digits_trio(digits, cache_root):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_ensemble("convnet-trio", digits, 15, 0, cache_root)


@pytest.fixture(scope="session")
def digits_trio_stats(digits, digits_trio, cache_root):
    return compute_or_load_stats(digits, digits_trio, cache_root)
