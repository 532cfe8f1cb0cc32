"""Overlapped-nuclei separation.

The main splitter finds watershed markers by iterative erosion with an
elliptic kernel: erode until the blob count drops, recover the vanished
blobs from the pre-erosion image as seeds, and repeat until the eroded
image is empty.  Seeds are dilated and flooding runs on the negated
Euclidean distance transform of the region, so no intensity gradient is
needed.  DTW (h-maxima of the distance transform) and a GMM on foreground
coordinates serve as baseline splitters.

``separate_all`` runs the whole mask-to-instances pass: regions flagged by
the overlap detector are split, everything else passes through unchanged,
and output labels are renumbered in raster order of each instance's first
pixel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from skimage.segmentation import expand_labels, watershed
from skimage.morphology import h_maxima
from sklearn.mixture import GaussianMixture

from .gbdt import GbdtModel, gbdt_predict_batch
from .postproc import EIGHT
from .raster import BinaryMask, LabelMap, ProbabilityMap
from .regions import RegionError, connected_components, extract_region, feature_matrix, region_features

log = logging.getLogger(__name__)

SPLITTERS = ("proposed", "dtw", "gmm")

# Fallback single-nucleus area (px) for the GMM component-count heuristic
# when the caller has no estimate from detected single regions.
DEFAULT_TYPICAL_AREA = 300.0


class SeparationError(ValueError):
    """Empty region, out-of-region seed, or invalid parameters."""


@dataclass(frozen=True)
class SeparationParams:
    kernel: tuple[int, int] = (1, 1)  # elliptic semi-axes (a, b) in px
    contour_min: int = 10
    dilate_radius: int = 1
    splitter: str = "proposed"

    def __post_init__(self) -> None:
        a, b = self.kernel
        if a < 1 or b < 1:
            raise ValueError("kernel semi-axes must be >= 1")
        if self.contour_min < 0:
            raise ValueError("contour_min must be >= 0")
        if self.dilate_radius < 0:
            raise ValueError("dilate_radius must be >= 0")
        if self.splitter not in SPLITTERS:
            raise ValueError(f"splitter must be one of {SPLITTERS}")


@dataclass(frozen=True)
class SeedSet:
    seeds: LabelMap
    n_seeds: int


@dataclass(frozen=True)
class RegionOutcome:
    """What happened to one input region during separation."""

    region: int
    n_seeds: int
    split_applied: bool
    detector_probability: float | None


def elliptic_kernel(a: int, b: int) -> np.ndarray:
    """Elliptic structuring element with semi-axes (a, b); (1, 1) is the
    3x3 cross (digital unit disc)."""
    if a < 1 or b < 1:
        raise ValueError("semi-axes must be >= 1")
    ys, xs = np.mgrid[-b : b + 1, -a : a + 1]
    return (xs / a) ** 2 + (ys / b) ** 2 <= 1.0


def _relabel_raster_order(labels: np.ndarray) -> np.ndarray:
    """Renumber positive labels 1..K by first pixel in raster order."""
    flat = labels.ravel()
    values, first = np.unique(flat, return_index=True)
    nonzero = values > 0
    if not nonzero.any():
        return np.zeros_like(labels, dtype=np.int32)
    order = np.argsort(first[nonzero], kind="stable")
    remap = np.zeros(int(values.max()) + 1, dtype=np.int32)
    remap[values[nonzero][order]] = np.arange(1, nonzero.sum() + 1, dtype=np.int32)
    return remap[labels]


def erosion_seeds(region: BinaryMask, kernel: tuple[int, int] = (1, 1)) -> SeedSet:
    """Watershed markers by iterative erosion with blob-recovery.

    Blob counts never rise through merging under erosion, so a drop means
    blobs vanished; those blobs are copied from the pre-erosion image into
    the seed image at their last surviving size.  Ends when the eroded
    image is empty, which needs no extra stopping rule for the small blob
    counts seen in overlapped regions.
    """
    if region.foreground_count == 0:
        raise SeparationError("region has no foreground pixels")
    ker = elliptic_kernel(*kernel)
    current = region.bits
    current_lab, current_n = ndi.label(current, structure=EIGHT)
    seeds = np.zeros(region.bits.shape, dtype=np.int32)
    next_seed = 0
    while True:
        eroded = ndi.binary_erosion(current, structure=ker, border_value=0)
        lab, n = ndi.label(eroded, structure=EIGHT)
        if n < current_n:
            surviving = np.unique(current_lab[eroded])
            vanished = np.setdiff1d(np.arange(1, current_n + 1), surviving)
            for v in vanished:
                next_seed += 1
                seeds[current_lab == v] = next_seed
        if n == 0:
            break
        current, current_lab, current_n = eroded, lab, n
    return SeedSet(seeds=LabelMap(_relabel_raster_order(seeds)), n_seeds=next_seed)


def _fill_unassigned(assigned: np.ndarray, region_bits: np.ndarray) -> np.ndarray:
    """Assign any leftover region pixels to the nearest labeled pixel."""
    missing = region_bits & (assigned == 0)
    if not missing.any():
        return assigned
    dist_idx = ndi.distance_transform_edt(assigned == 0, return_distances=False, return_indices=True)
    out = assigned.copy()
    out[missing] = assigned[dist_idx[0][missing], dist_idx[1][missing]]
    return out


def marker_watershed(region: BinaryMask, seeds: SeedSet, dilate_radius: int = 1) -> LabelMap:
    """Flood the region from dilated seed markers over its negated
    Euclidean distance transform."""
    bits = region.bits
    seed_arr = seeds.seeds.labels
    if seed_arr.shape != bits.shape:
        raise SeparationError("seed image and region shapes differ")
    if ((seed_arr > 0) & ~bits).any():
        raise SeparationError("seed pixels fall outside the region")
    if seeds.n_seeds == 0:
        raise SeparationError("seed set is empty")
    markers = seed_arr
    if dilate_radius > 0:
        markers = expand_labels(seed_arr, distance=float(dilate_radius))
        markers = np.where(bits, markers, 0)
    edt = ndi.distance_transform_edt(bits)
    flooded = watershed(-edt, markers=markers, mask=bits, connectivity=2)
    flooded = _fill_unassigned(flooded, bits)
    return LabelMap(_relabel_raster_order(flooded))


def split_region_dtw(region: BinaryMask, h: float = 2.0) -> LabelMap:
    """Distance-transform watershed: markers are h-maxima of the EDT."""
    if region.foreground_count == 0:
        raise SeparationError("region has no foreground pixels")
    bits = region.bits
    edt = ndi.distance_transform_edt(bits)
    peaks = h_maxima(edt, h, footprint=EIGHT) > 0
    peaks &= bits
    markers, n = ndi.label(peaks, structure=EIGHT)
    if n == 0:
        return LabelMap(bits.astype(np.int32))
    flooded = watershed(-edt, markers=markers, mask=bits, connectivity=2)
    flooded = _fill_unassigned(flooded, bits)
    return LabelMap(_relabel_raster_order(flooded))


def split_region_gmm(
    region: BinaryMask, typical_area: float | None = None, seed: int = 0
) -> LabelMap:
    """Gaussian-mixture baseline: EM on foreground pixel coordinates with
    k = clamp(round(area / typical_area), 1, 5); non-convergence after 200
    iterations falls back to a single part."""
    if region.foreground_count == 0:
        raise SeparationError("region has no foreground pixels")
    bits = region.bits
    area = float(region.foreground_count)
    typical = DEFAULT_TYPICAL_AREA if typical_area is None else float(typical_area)
    k = int(np.clip(round(area / max(typical, 1.0)), 1, 5))
    if k == 1 or area < 2 * k:
        return LabelMap(bits.astype(np.int32))
    ys, xs = np.nonzero(bits)
    coords = np.column_stack([xs, ys]).astype(np.float64)
    gm = GaussianMixture(
        n_components=k,
        covariance_type="full",
        max_iter=200,
        n_init=1,
        reg_covar=1e-3,
        random_state=seed,
    )
    gm.fit(coords)
    if not gm.converged_:
        return LabelMap(bits.astype(np.int32))
    assignment = gm.predict(coords).astype(np.int32) + 1
    out = np.zeros(bits.shape, dtype=np.int32)
    out[ys, xs] = assignment
    return LabelMap(_relabel_raster_order(out))


def _split_patch(
    patch: BinaryMask, params: SeparationParams, typical_area: float | None, seed: int
) -> tuple[LabelMap, int]:
    """Run the configured splitter on one region patch; returns the patch
    labels and the seed/part count."""
    if params.splitter == "proposed":
        seeds = erosion_seeds(patch, params.kernel)
        parts = marker_watershed(patch, seeds, params.dilate_radius)
        return parts, seeds.n_seeds
    if params.splitter == "dtw":
        parts = split_region_dtw(patch)
        return parts, parts.n_instances
    parts = split_region_gmm(patch, typical_area=typical_area, seed=seed)
    return parts, parts.n_instances


@dataclass(frozen=True)
class SeparationReport:
    labels: LabelMap
    outcomes: tuple[RegionOutcome, ...] = field(default=())


def separate_all_with_report(
    mask: BinaryMask,
    prob: ProbabilityMap,
    detector: GbdtModel,
    params: SeparationParams = SeparationParams(),
) -> SeparationReport:
    """Full pass: detect overlapped regions, split them, keep the rest.

    The foreground pixel set is preserved exactly; instances are disjoint
    and renumbered 1..K by first raster pixel, independent of processing
    order.
    """
    comps = connected_components(mask)
    h, w = mask.bits.shape
    out = np.zeros((h, w), dtype=np.int32)
    next_tmp = 0
    outcomes: list[RegionOutcome] = []

    candidates = []  # (region, features)
    passthrough = []  # (region, probability or None)
    single_areas = []
    for k in range(1, comps.n_instances + 1):
        region = extract_region(comps, k)
        if len(region.contour) <= params.contour_min:
            passthrough.append((region, None))
            continue
        try:
            fv = region_features(region, prob)
        except RegionError as exc:
            log.warning("region %d skipped by detector: %s", k, exc)
            passthrough.append((region, None))
            continue
        candidates.append((region, fv))

    flagged = []
    if candidates:
        probs = gbdt_predict_batch(detector, feature_matrix([fv for _, fv in candidates]))
        for (region, _), p in zip(candidates, probs):
            if p < 0.5:
                passthrough.append((region, float(p)))
                single_areas.append(region.area)
            else:
                flagged.append((region, float(p)))

    for region, p in passthrough:
        next_tmp += 1
        out[region.pixels[:, 1], region.pixels[:, 0]] = next_tmp
        outcomes.append(RegionOutcome(region.label, 1, False, p))

    typical = float(np.median(single_areas)) if single_areas else None
    for region, p in flagged:
        patch = region.mask_patch()
        x0, y0, _, _ = region.bbox
        parts, n_seeds = _split_patch(patch, params, typical, seed=region.label)
        sub = parts.labels
        nonzero = sub > 0
        next_base = next_tmp
        out[y0 : y0 + sub.shape[0], x0 : x0 + sub.shape[1]][nonzero] = sub[nonzero] + next_base
        next_tmp += parts.n_instances
        outcomes.append(RegionOutcome(region.label, n_seeds, True, p))

    outcomes.sort(key=lambda o: o.region)
    return SeparationReport(labels=LabelMap(_relabel_raster_order(out)), outcomes=tuple(outcomes))


def separate_all(
    mask: BinaryMask,
    prob: ProbabilityMap,
    detector: GbdtModel,
    params: SeparationParams = SeparationParams(),
) -> LabelMap:
    """Mask-to-instances pass; see separate_all_with_report."""
    return separate_all_with_report(mask, prob, detector, params).labels
