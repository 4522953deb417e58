import numpy as np
import pytest

from mediqa.blocks import BlockConfig


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_cfg():
    """Smallest legal backbone: 4 tokens, 8-dim embeddings, 16 channels."""
    return BlockConfig(img_size=16, patch_size=8, embed_dim=8, num_heads=2,
                       depth=2, window_size=2, mlp_ratio=2.0, seed=3)


@pytest.fixture
def small_cfg():
    """Desk-scale config used by the end-to-end acceptance runs."""
    return BlockConfig(img_size=32, patch_size=8, embed_dim=32, num_heads=4,
                       depth=2, window_size=2, mlp_ratio=2.0, seed=3)
