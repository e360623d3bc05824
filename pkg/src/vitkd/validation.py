"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Coerce X to float64 (n, H, W, 3) images in [0, 1].

    Accepts (n, H, W, 3) directly, or flattened (n, H*W*3) rows when
    image_size is known. Raises ValueError on anything else.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if image_size is None:
            raise ValueError("2-d input needs image_size to unflatten")
        expected = image_size * image_size * 3
        if X.shape[1] != expected:
            raise ValueError(f"flattened rows have {X.shape[1]} values, expected "
                             f"{expected} for image_size={image_size}")
        X = X.reshape(len(X), image_size, image_size, 3)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected (n, H, W, 3) images, got shape {X.shape}")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ValueError(f"images are {X.shape[1]}x{X.shape[2]}, model expects "
                         f"{image_size}x{image_size}")
    lo, hi = float(X.min()), float(X.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixel values span [{lo}, {hi}]; expected [0, 1]")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"labels must be 1-d of length {n_samples}, got shape "
                         f"{y.shape}")
    return y


def train_val_split(n: int, val_fraction: float, seed: int,
                    labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic stratified-ish split: a seeded shuffle per class."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction={val_fraction} outside (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5B11)))
    val_idx = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        take = max(1, int(round(val_fraction * len(members))))
        val_idx.extend(members[:take].tolist())
    val = np.array(sorted(val_idx), dtype=np.int64)
    mask = np.ones(n, dtype=bool)
    mask[val] = False
    return np.flatnonzero(mask), val
