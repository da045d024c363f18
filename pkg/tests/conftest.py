import numpy as np
import pytest

from lalign.synthdata import SynthSpec, gen_dataset
from lalign.vit import DecoderWeights, ViTConfig, ViTWeights


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    # 4 patches, 2 blocks: small enough for exhaustive checks.
    return ViTConfig(image_size=8, patch_size=4, dim=8, depth=2, heads=2,
                     num_prefix_tokens=1, mlp_ratio=2.0)


@pytest.fixture
def tiny_vit(tiny_config, rng):
    return ViTWeights.init(tiny_config, rng, dtype=np.float64)


@pytest.fixture
def tiny_decoder(tiny_config, rng):
    return DecoderWeights.init(tiny_config.dim, tiny_config.dim, tiny_config.seq_len,
                               tiny_config.heads, rng, dtype=np.float64, mlp_ratio=2.0)


@pytest.fixture
def tiny_images(rng):
    return rng.random((3, 8, 8, 3))


@pytest.fixture
def small_dataset():
    spec = SynthSpec(grid_rows=4, grid_cols=4, patch_size=4, num_classes=6,
                     classes_min=1, classes_max=3)
    return gen_dataset(spec, 24, seed=99)
