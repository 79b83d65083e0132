"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


def flatten_tiles(X, pixel_scale: float) -> tuple[np.ndarray, tuple]:
    """``(n, h, w, c)`` tiles -> ``(n, h*w*c)`` float32 rows scaled by ``pixel_scale``.

    Returns the flattened matrix and the per-tile shape.
    """
    if hasattr(X, "to_array"):
        X = X.to_array()
    X = np.asarray(X)
    if X.ndim < 2 or X.shape[0] == 0:
        raise ValueError(f"expected a non-empty stack of tiles, got shape {X.shape}")
    shape = tuple(X.shape[1:])
    return X.reshape(X.shape[0], -1).astype(np.float32) * np.float32(pixel_scale), shape

