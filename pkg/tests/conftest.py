from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from pcn import datasets, kernels


def mnist_root() -> Path | None:
    root = Path(os.environ.get(datasets.DATA_DIR_ENV, "/root/data"))
    for cand in (root, root / "mnist"):
        if (cand / "train-images-idx3-ubyte").exists() or \
                (cand / "train-images-idx3-ubyte.gz").exists():
            return root
    return None


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    before = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(before)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist():
    root = mnist_root()
    if root is None:
        pytest.skip("MNIST not found; set PCN_DATA_DIR")
    return datasets.load("mnist", root)


def pytest_terminal_summary(terminalreporter):
    import acceptance_runs

    if acceptance_runs.REPORT:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in acceptance_runs.REPORT:
            terminalreporter.write_line(line)
