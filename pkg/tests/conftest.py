import numpy as np
import pytest

from msmil.features import FEATURE_DIM, FeatureBag
from msmil.slide import SCALES, SlideImage


def make_bag(rng, slide_id="s0", label="FN", n_patches=6, dim=FEATURE_DIM,
             shift=0.0):
    """Random feature bag; ``shift`` offsets every value (class signal)."""
    per_scale = {
        s: (rng.standard_normal((n_patches, dim)) + shift).astype(np.float32)
        for s in SCALES
    }
    return FeatureBag(slide_id=slide_id, label=label, per_scale=per_scale)


def make_dataset(rng, per_class=4, n_patches=6, shift=1.0):
    """Tiny labelled dataset: FN around 0, PC around ``shift``."""
    bags = []
    for i in range(per_class):
        bags.append(make_bag(rng, f"FN{i}", "FN", n_patches, shift=0.0))
    for i in range(per_class):
        bags.append(make_bag(rng, f"PC{i}", "PC", n_patches, shift=shift))
    return bags


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


@pytest.fixture
def black_slide():
    pixels = np.zeros((1024, 1024, 3), dtype=np.uint8)
    return SlideImage(id="black", pixels=pixels, label="FN")


@pytest.fixture
def white_slide():
    pixels = np.full((1024, 1024, 3), 255, dtype=np.uint8)
    return SlideImage(id="white", pixels=pixels, label="PC")


@pytest.fixture
def half_slide():
    """Left half black (tissue), right half white (background)."""
    pixels = np.full((1024, 2048, 3), 255, dtype=np.uint8)
    pixels[:, :1024] = 0
    return SlideImage(id="half", pixels=pixels, label="FN")
