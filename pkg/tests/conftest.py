import numpy as np
import pytest

from polyseg.data import Label, generate_synthetic_sample, write_sample, build_manifest, split_dataset, save_manifest


@pytest.fixture(scope="session")
def polyp_sample():
    return generate_synthetic_sample(7, Label.POLYPS, (64, 64))


@pytest.fixture(scope="session")
def nonpolyp_sample():
    return generate_synthetic_sample(7, Label.NON_POLYPS, (64, 64))


@pytest.fixture
def small_dataset(tmp_path):
    """10 written samples (8 polyp, 2 non-polyp) with an 80:20 split."""
    root = tmp_path / "ds"
    for i in range(8):
        write_sample(generate_synthetic_sample(100 + i, Label.POLYPS, (64, 64)), root)
    for i in range(2):
        write_sample(generate_synthetic_sample(100 + i, Label.NON_POLYPS, (64, 64)), root)
    manifest = split_dataset(build_manifest(root, seed=0), 0.8, seed=0)
    save_manifest(manifest)
    return manifest


@pytest.fixture(scope="session")
def overfit_pairs():
    """Fixed 4-sample 64x64 fixture, seed 7."""
    pairs = []
    for i in range(4):
        s = generate_synthetic_sample(7 + i, Label.POLYPS, (64, 64))
        pairs.append((s.image, s.gt_mask))
    return pairs


def random_binary_mask(rng, shape=(16, 16)):
    return (rng.random(shape) > 0.5).astype(np.uint8)
