"""Core pixel-grid types and PNG I/O shared by every pipeline stage.

Conventions (fixed so coordinate-based tests are deterministic):

* row-major storage, origin at the top-left, y increasing downward;
* (x, y) order in all coordinate tuples, array indexing is ``[y, x]``;
* PNG is the only raster format: 8-bit grayscale, 8-bit RGB, or 16-bit
  grayscale (used for instance label maps).

All types freeze their backing array after construction and are safe to
share across threads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


class RasterError(ValueError):
    """Unreadable file, unsupported pixel format, or invalid grid data."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class RasterImage:
    """8-bit gray/RGB or 16-bit gray image, shape (h, w) or (h, w, 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            pass
        elif px.ndim == 3 and px.shape[2] == 3:
            if px.dtype != np.uint8:
                raise RasterError("RGB images must be 8-bit")
        else:
            raise RasterError(f"expected (h, w) or (h, w, 3) pixels, got shape {px.shape}")
        if px.dtype not in (np.dtype(np.uint8), np.dtype(np.uint16)):
            raise RasterError(f"unsupported dtype {px.dtype}; use uint8 or uint16")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise RasterError("image must be at least 1x1")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    @property
    def bit_depth_max(self) -> int:
        return 255 if self.pixels.dtype == np.uint8 else 65535


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel nucleus probability in [0, 1], shape (h, w) float64."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise RasterError(f"probability map must be 2-D, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise RasterError("probability map must be at least 1x1")
        if not np.isfinite(v).all():
            raise RasterError("probability map contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise RasterError("probability values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel foreground flag, shape (h, w) bool."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        b = np.asarray(self.bits)
        if b.dtype != np.bool_:
            b = b.astype(bool)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise RasterError(f"mask must be 2-D and non-empty, got shape {b.shape}")
        object.__setattr__(self, "bits", _frozen(b))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def foreground_count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class LabelMap:
    """Instance labels: 0 = background, k >= 1 = instance k.

    Labels must form a contiguous set {0, 1, ..., K} with every positive
    label non-empty.
    """

    labels: np.ndarray

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if not np.issubdtype(lab.dtype, np.integer):
            raise RasterError("labels must be integers")
        if lab.ndim != 2 or lab.shape[0] < 1 or lab.shape[1] < 1:
            raise RasterError(f"label map must be 2-D and non-empty, got shape {lab.shape}")
        if lab.size and lab.min() < 0:
            raise RasterError("labels must be non-negative")
        lab = lab.astype(np.int32, copy=True)
        present = np.unique(lab)
        expected = np.arange(present[-1] + 1) if present.size else present
        if present.size != expected.size or (present != expected).any():
            raise RasterError("labels must form a contiguous set {0..K}")
        object.__setattr__(self, "labels", _frozen(lab))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def n_instances(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0


def load_image(path: str | os.PathLike) -> RasterImage:
    """Load an 8-bit gray/RGB or 16-bit gray PNG, preserving pixels bit-exactly."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "RGB":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode in ("I;16", "I;16B"):
                arr = np.asarray(im, dtype=np.uint16)
            elif mode == "I":
                # Some decoders widen 16-bit grayscale to 32-bit.
                wide = np.asarray(im, dtype=np.int64)
                if wide.min() < 0 or wide.max() > 65535:
                    raise RasterError(f"{path}: pixel values exceed 16-bit range")
                arr = wide.astype(np.uint16)
            else:
                raise RasterError(f"{path}: unsupported mode {mode!r} (need 8-bit gray/RGB or 16-bit gray)")
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError) as exc:
        raise RasterError(f"{path}: unreadable image ({exc})") from exc
    return RasterImage(arr)


def save_image(img: RasterImage, path: str | os.PathLike) -> None:
    """Write a RasterImage as PNG (lossless, bit-exact round-trip)."""
    Image.fromarray(np.asarray(img.pixels)).save(path, format="PNG")


def to_probability(img: RasterImage) -> ProbabilityMap:
    """Normalize a single-channel image to [0, 1] by its bit-depth maximum."""
    if img.channels != 1:
        raise RasterError("to_probability expects a single-channel image")
    return ProbabilityMap(img.pixels.astype(np.float64) / img.bit_depth_max)


def quantize_probability(p: ProbabilityMap) -> RasterImage:
    """Quantize a probability map to a 16-bit grayscale image (rounded)."""
    return RasterImage(np.rint(p.values * 65535.0).astype(np.uint16))


def save_label_map(labels: LabelMap, path: str | os.PathLike) -> None:
    """Write a label map as a 16-bit grayscale PNG (round-trips bit-exactly)."""
    if labels.n_instances > 65535:
        raise RasterError(f"label overflow: {labels.n_instances} > 65535")
    save_image(RasterImage(labels.labels.astype(np.uint16)), path)


def load_label_map(path: str | os.PathLike) -> LabelMap:
    """Read a label map previously written by save_label_map."""
    img = load_image(path)
    if img.channels != 1:
        raise RasterError(f"{path}: label maps must be single-channel")
    return LabelMap(img.pixels.astype(np.int32))
