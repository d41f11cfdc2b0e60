import math

import numpy as np
import pytest
import torch

from bhxct.core import Image2D, parallel_geometry
from bhxct.phantom import PhantomSpec, gen_disk

torch.set_num_threads(1)

# desk-scale canonical object: 15 mm disk on a 256^2 grid of 0.08 mm pixels
SIZE = 256
PIXEL = 0.08
RADIUS = 7.5
BINS = 363


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running (minutes)")
    config.addinivalue_line("markers", "acceptance: exit criteria")


@pytest.fixture(scope="session")
def disk() -> Image2D:
    return gen_disk(PhantomSpec(image_size=SIZE, pixel_size=PIXEL, base_radius=RADIUS))


@pytest.fixture(scope="session")
def disk_mask(disk) -> Image2D:
    return disk.replace(disk.data > 0.5)


@pytest.fixture(scope="session")
def dense_geometry():
    return parallel_geometry(720, BINS, PIXEL)


def grid_xy(size=SIZE, pixel=PIXEL):
    i, j = np.mgrid[:size, :size]
    return (j - (size - 1) / 2) * pixel, ((size - 1) / 2 - i) * pixel


def chord(radius, s):
    return 2.0 * np.sqrt(np.maximum(radius * radius - np.asarray(s) ** 2, 0.0))


__all__ = ["SIZE", "PIXEL", "RADIUS", "BINS", "grid_xy", "chord", "math"]
