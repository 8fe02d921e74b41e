"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .data import ToySample


def check_image(image, even: bool = False) -> np.ndarray:
    """Return ``image`` as float64 ``[H, W, C]`` (or ``[H, W]``) with values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim not in (2, 3) or arr.size == 0:
        raise ValueError(f"expected a 2-d or 3-d image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    if even and (arr.shape[0] % 2 or arr.shape[1] % 2):
        raise ValueError(f"image {arr.shape[0]}x{arr.shape[1]} must have even sides")
    return arr


def check_texts(X) -> list[str]:
    if isinstance(X, str):
        raise TypeError("expected a sequence of strings, got a single string")
    texts = list(X)
    for t in texts:
        if not isinstance(t, str) or not t:
            raise ValueError(f"expected non-empty strings, got {t!r}")
    return texts


def check_samples(X, image_size: int) -> list[ToySample]:
    samples = list(X)
    if not samples:
        raise ValueError("no samples")
    for s in samples:
        if not isinstance(s, ToySample):
            raise TypeError(f"expected ToySample, got {type(s).__name__}")
        img = check_image(s.image)
        if img.shape[:2] != (image_size, image_size):
            raise ValueError(f"sample {s.sample_id}: image {img.shape[:2]} != {image_size}x{image_size}")
        if not s.turns:
            raise ValueError(f"sample {s.sample_id}: no dialogue turns")
    return samples
