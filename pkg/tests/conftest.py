import numpy as np
import pytest

from laganet.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    """Smallest network that keeps every branch: 24x8 input -> 3x1 branch maps."""
    return ModelConfig(
        trunk_widths=(4, 8, 8),
        branch_channels=8,
        reduction_width=6,
        input_height=24,
        input_width=8,
        n_classes=2,
        dropout=0.0,
        seed=3,
    )
