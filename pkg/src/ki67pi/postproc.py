"""Probability-map binarization and mask cleanup.

The chain is: local-mean adaptive threshold, hole filling, binary opening
with a disc, small-object removal.  Foreground is 8-connected and
background 4-connected throughout; out-of-image pixels count as
background for morphology.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .raster import BinaryMask, ProbabilityMap

EIGHT = np.ones((3, 3), dtype=int)
FOUR = ndi.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class PostprocParams:
    """Cleanup parameters; defaults tuned once on the synthetic generator.

    A positive offset loosens the threshold (more foreground), so flat
    all-background fields need offset < 0 to stay background; the default
    keeps the decision boundary just above the local mean.
    """

    window: int = 61
    offset: float = -0.02
    open_radius: int = 1
    min_area: int = 30

    def __post_init__(self) -> None:
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not -1.0 <= self.offset <= 1.0:
            raise ValueError("offset must lie in [-1, 1]")
        if self.open_radius < 0:
            raise ValueError("open_radius must be >= 0")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")


def disc_element(radius: int) -> np.ndarray:
    """Digital disc: offsets with dx^2 + dy^2 <= radius^2."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return (dx * dx + dy * dy) <= radius * radius


def _windowed_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Local mean over a window x window neighborhood with mirror padding.

    Mirror padding reflects without repeating the edge sample
    (np.pad mode='reflect'); computed exactly via an integral image.
    """
    pad = window // 2
    padded = np.pad(values, pad, mode="reflect")
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.float64)
    np.cumsum(padded, axis=0, out=integral[1:, 1:])
    np.cumsum(integral[1:, 1:], axis=1, out=integral[1:, 1:])
    h, w = values.shape
    sums = (
        integral[window:, window:]
        - integral[:h, window:]
        - integral[window:, :w]
        + integral[:h, :w]
    )
    return sums / float(window * window)


def adaptive_threshold(p: ProbabilityMap, params: PostprocParams) -> BinaryMask:
    """Mean-C local threshold: foreground iff p > local_mean - offset.

    A positive offset loosens the rule (more foreground).  Invariant to
    adding a constant to all probabilities since the local mean shifts by
    the same amount.
    """
    mean = _windowed_mean(p.values, params.window)
    return BinaryMask(p.values > mean - params.offset)


def fill_holes(m: BinaryMask) -> BinaryMask:
    """Fill background components not 4-connected to the image border."""
    return BinaryMask(ndi.binary_fill_holes(m.bits, structure=FOUR))


def binary_open(m: BinaryMask, radius: int) -> BinaryMask:
    """Opening (erosion then dilation) with a disc element; radius 0 is identity."""
    if radius == 0:
        return m
    disc = disc_element(radius)
    eroded = ndi.binary_erosion(m.bits, structure=disc, border_value=0)
    return BinaryMask(ndi.binary_dilation(eroded, structure=disc, border_value=0))


def remove_small(m: BinaryMask, min_area: int) -> BinaryMask:
    """Drop 8-connected foreground components with fewer than min_area pixels."""
    if min_area <= 0:
        return m
    labels, n = ndi.label(m.bits, structure=EIGHT)
    if n == 0:
        return m
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return BinaryMask(keep[labels])


def clean_mask(p: ProbabilityMap, params: PostprocParams) -> BinaryMask:
    """Full post-processing chain: threshold, fill, open, small-object removal."""
    m = adaptive_threshold(p, params)
    m = fill_holes(m)
    m = binary_open(m, params.open_radius)
    return remove_small(m, params.min_area)
