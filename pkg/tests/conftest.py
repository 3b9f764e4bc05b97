import os
from pathlib import Path

import numpy as np
import pytest

from dsacondense.runtime import fixed_threading, tune_allocator

tune_allocator()
_threads = fixed_threading(1)
_threads.__enter__()

DATA_ROOT = Path(os.environ.get("DSACONDENSE_DATA", "/root/data"))


def have_mnist() -> bool:
    return (DATA_ROOT / "mnist" / "train-images-idx3-ubyte").exists() or \
        (DATA_ROOT / "mnist" / "train-images-idx3-ubyte.gz").exists()


def have_cifar10() -> bool:
    return (DATA_ROOT / "cifar-10-batches-bin" / "data_batch_1.bin").exists()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def data_root():
    return DATA_ROOT


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
