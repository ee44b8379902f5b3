"""Shared pytest configuration.

Registers the ``slow`` marker and skips those tests by default. They train
small models for many steps, so run them deliberately with::

    RUN_SLOW=1 pytest tests/ -m slow
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion import tensorcore as tc  # noqa: E402
from sparsemotion.config import BackboneConfig, InterpConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "slow: trains models for many steps; minutes on a laptop CPU. "
        "Skipped unless RUN_SLOW=1 is set.",
    )


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RUN_SLOW"):
        return
    skip_slow = pytest.mark.skip(reason="slow test; set RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    with tc.default_dtype(np.float64):
        yield


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(
        n_enc_layers=1,
        n_dec_layers=1,
        d_model=16,
        n_heads=2,
        d_ffn=32,
        max_positions=256,
        rel_buckets=8,
        n_experts=2,
        top_k=1,
    )


@pytest.fixture
def tiny_interp():
    return InterpConfig(
        d_model=16,
        n_temporal_layers=1,
        n_part_layers=1,
        n_heads=2,
        d_ffn=32,
        max_offset=8,
    )
