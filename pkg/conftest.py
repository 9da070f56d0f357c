"""Shared fixtures: flat modules on sys.path, float64 context, a tiny phantom corpus"""

import sys
from pathlib import Path

import pytest
import torch

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from phantom_data import build_training_corpus  # noqa: E402


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture(scope="session")
def tiny_corpus():
    """3 training + 2 test patients, both views and phases, 2 map variants"""
    return build_training_corpus(3, variants=2, seed=7, resolution=64, n_test_patients=2)


@pytest.fixture
def tmp_out(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    return out
