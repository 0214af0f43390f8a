import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gcdepth.data import generate_dataset  # noqa: E402
from gcdepth.geometry import CameraIntrinsics  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def clean_intrinsics():
    """Power-of-two focal length and integer principal point: the projection
    chain stays exact in float64 for small-mantissa depths."""
    return CameraIntrinsics(fx=64.0, fy=64.0, cx=96.0, cy=32.0, width=192, height=64)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small on-disk synthetic dataset shared by data/pipeline/cli tests."""
    root = tmp_path_factory.mktemp("tinyds")
    train = generate_dataset(root / "train", n_clips=3, frames=5, seed=501,
                             width=96, height=32)
    test = generate_dataset(root / "test", n_clips=2, frames=4, seed=901,
                            width=96, height=32)
    return {"root": root, "train": train, "test": test}


def rand_image(rng, c=3, h=8, w=8):
    return torch.from_numpy(rng.uniform(0.05, 0.95, (c, h, w)))


def rand_map(rng, h=8, w=8, lo=0.1, hi=1.0):
    return torch.from_numpy(rng.uniform(lo, hi, (h, w)))
