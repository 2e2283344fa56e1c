from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from rgbpose.config import preset
from rgbpose.synth import Dataset, sample_dataset


@pytest.fixture(scope="session")
def tiny_cfg():
    return preset("tiny")


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory, tiny_cfg) -> Path:
    root = tmp_path_factory.mktemp("tiny_data")
    sample_dataset(tiny_cfg.synth_config(), 7, root)
    return root


@pytest.fixture(scope="session")
def tiny_ds(tiny_root) -> Dataset:
    return Dataset(tiny_root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
