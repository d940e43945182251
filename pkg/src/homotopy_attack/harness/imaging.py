"""Image I/O, tile partitions and perturbation-position maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..tensor_core import DEFAULT_ZERO_TOL, GroupPartition, TENSOR_MAGIC, load_tensor

__all__ = [
    "ImageFormatError",
    "build_tile_partition",
    "position_map",
    "render_position_map",
    "read_png",
    "write_png",
    "read_image",
]


class ImageFormatError(ValueError):
    pass


def build_tile_partition(shape, tile: int) -> GroupPartition:
    """Non-overlapping ``tile x tile`` spatial blocks spanning all channels.

    ``shape`` is ``(H, W, C)`` with row-major flat indexing. Edge tiles are
    smaller when ``tile`` does not divide the image.
    """
    h, w, c = (int(d) for d in shape)
    if tile < 1:
        raise ValueError("tile must be a positive integer")
    if tile > h or tile > w:
        raise ValueError(f"tile {tile} larger than image {h}x{w}")
    index = np.arange(h * w * c).reshape(h, w, c)
    groups = [
        index[i:i + tile, j:j + tile, :].ravel()
        for i in range(0, h, tile)
        for j in range(0, w, tile)
    ]
    return GroupPartition(groups, h * w * c)


def position_map(delta, shape=None, zero_tol: float = DEFAULT_ZERO_TOL) -> np.ndarray:
    """8-bit RGB map: a channel lights up at full intensity where it is perturbed.

    Unperturbed pixels are black, fully perturbed ones white, single channels
    pure red/green/blue and pairs their additive mix.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if shape is not None:
        delta = delta.reshape(shape)
    if delta.ndim != 3 or delta.shape[2] != 3:
        raise ValueError(f"position maps need an (H, W, 3) perturbation, got {delta.shape}")
    return np.where(np.abs(delta) > zero_tol, 255, 0).astype(np.uint8)


def render_position_map(delta, path, shape=None, zero_tol: float = DEFAULT_ZERO_TOL, scale: int = 1) -> np.ndarray:
    img = position_map(delta, shape, zero_tol)
    out = Image.fromarray(img)
    if scale > 1:
        out = out.resize((img.shape[1] * scale, img.shape[0] * scale), Image.NEAREST)
    out.save(path, format="PNG")
    return img


def read_png(path) -> np.ndarray:
    """8-bit grayscale or RGB PNG to an ``(H, W, C)`` float64 array in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                raise ImageFormatError(f"unsupported PNG mode {im.mode!r}; need 8-bit L or RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def write_png(x, path) -> None:
    """Quantize ``x`` in ``[0, 1]`` to 8 bits (round to nearest) and save as PNG."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise ValueError(f"need an (H, W, 1|3) image, got {x.shape}")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("image values must lie in [0, 1]")
    q = np.rint(x * 255.0).astype(np.uint8)
    im = Image.fromarray(q[:, :, 0] if x.shape[2] == 1 else q)
    im.save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Load a TSR1 tensor or a PNG, chosen by the file's magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == TENSOR_MAGIC:
        return load_tensor(path)
    return read_png(path)
