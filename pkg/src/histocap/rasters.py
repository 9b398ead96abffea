"""Raster IO: 8-bit RGB slides as PNG or binary PPM (P6), grayscale as PGM.

Arrays are HxWx3 (or HxW for grayscale) uint8, row-major.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def load_rgb(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr


def save_rgb(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected HxWx3 pixels, got shape {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(Path(path))


def save_gray(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"expected HxW pixels, got shape {arr.shape}")
    Image.fromarray(arr, mode="L").save(Path(path))
