"""Shared fixtures: finite-value checking on, offline digit assets."""

import numpy as np
import pytest

import drnkit.tensor
from drnkit.data import DatasetSplit

drnkit.tensor.FINITE_CHECKS = True


@pytest.fixture(scope="session")
def digit_glyphs() -> DatasetSplit:
    """Bundled scikit-learn handwritten digits as a classify split (8x8)."""
    from sklearn.datasets import load_digits

    X, y = load_digits(return_X_y=True)
    images = (X / 16.0).astype(np.float32).reshape(-1, 1, 8, 8)
    return DatasetSplit(images, y.astype(np.int64), "classify")


@pytest.fixture(scope="session")
def digit_glyphs_16(digit_glyphs) -> DatasetSplit:
    """The same digits upscaled 2x (16x16), for string canvases."""
    images = np.kron(digit_glyphs.images, np.ones((1, 1, 2, 2), dtype=np.float32))
    return DatasetSplit(images, digit_glyphs.labels, "classify")
