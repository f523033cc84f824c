import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from segloop.data import Detection
from segloop.masks import BinaryMask, rle_encode


def make_mask(height, width, coords):
    grid = np.zeros((height, width), dtype=bool)
    for r, c in coords:
        grid[r, c] = True
    return BinaryMask(grid)


def rect_mask(height, width, top, left, h, w):
    grid = np.zeros((height, width), dtype=bool)
    grid[top : top + h, left : left + w] = True
    return BinaryMask(grid)


def detection(image_id, category_id, mask: BinaryMask, confidence):
    return Detection(
        image_id=image_id,
        category_id=category_id,
        mask=rle_encode(mask),
        confidence=confidence,
    )


def random_mask(rng, height, width, ensure_nonempty=False):
    grid = rng.random((height, width)) < rng.uniform(0.1, 0.7)
    if ensure_nonempty and not grid.any():
        grid[rng.integers(0, height), rng.integers(0, width)] = True
    return BinaryMask(grid)


def random_rect_mask(rng, height, width):
    h = int(rng.integers(1, max(2, height // 2 + 1)))
    w = int(rng.integers(1, max(2, width // 2 + 1)))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return rect_mask(height, width, top, left, h, w)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
