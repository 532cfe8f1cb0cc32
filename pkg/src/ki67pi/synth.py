"""Deterministic synthetic H-DAB slide generator.

Ellipse nuclei on a white background: positive nuclei are rendered through
the inverse stain transform from a DAB optical density around 0.9,
negative ones from hematoxylin around 0.7, so stain deconvolution
recovers the class exactly.  The probability map is the union mask with a
one-pixel Gaussian edge, mimicking a well-trained segmenter.

Randomness comes from numpy's PCG64 generator seeded explicitly;
export_dataset derives each image's stream from (master seed, image
index), so datasets reproduce exactly.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .classify import StainVectors, od_to_rgb
from .raster import (
    BinaryMask,
    LabelMap,
    ProbabilityMap,
    RasterImage,
    quantize_probability,
    save_image,
    save_label_map,
)
from .regions import connected_components
from .scoring import RegionCount

MAX_PLACEMENT_ATTEMPTS = 100_000
_MIN_GAP = 3  # px of clearance between non-overlapping nuclei
_MIN_PAIR_IOU = 0.02  # an "overlapping" nucleus must intersect at least this much


class SynthesisError(RuntimeError):
    """Nucleus placement failed; lower the density or size range."""


@dataclass(frozen=True)
class SynthConfig:
    width: int = 256
    height: int = 256
    n_nuclei: int = 40
    positive_fraction: float = 0.25
    radius_range: tuple[float, float] = (8.0, 16.0)
    overlap_fraction: float = 0.3
    max_pair_overlap: float = 0.3
    stain_noise_sd: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("canvas must be at least 1x1")
        if self.n_nuclei < 0:
            raise ValueError("n_nuclei must be >= 0")
        lo, hi = self.radius_range
        if lo < 3 or hi < lo:
            raise ValueError("radii must be >= 3 with min <= max")
        for name in ("positive_fraction", "overlap_fraction", "max_pair_overlap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.stain_noise_sd < 0:
            raise ValueError("stain_noise_sd must be >= 0")


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def support_radius(self, phi: float) -> float:
        """Distance from center to the boundary along direction phi."""
        rel = phi - self.theta
        denom = math.hypot(self.b * math.cos(rel), self.a * math.sin(rel))
        return self.a * self.b / denom

    def render(self, width: int, height: int) -> np.ndarray:
        """Pixel-center rasterization over the full canvas."""
        r = math.ceil(max(self.a, self.b))
        x0 = max(0, int(self.cx) - r - 1)
        x1 = min(width, int(self.cx) + r + 2)
        y0 = max(0, int(self.cy) - r - 1)
        y1 = min(height, int(self.cy) + r + 2)
        out = np.zeros((height, width), dtype=bool)
        if x0 >= x1 or y0 >= y1:
            return out
        ys, xs = np.mgrid[y0:y1, x0:x1]
        dx = xs - self.cx
        dy = ys - self.cy
        ct, st = math.cos(self.theta), math.sin(self.theta)
        u = (dx * ct + dy * st) / self.a
        v = (-dx * st + dy * ct) / self.b
        out[y0:y1, x0:x1] = u * u + v * v <= 1.0
        return out


@dataclass(frozen=True)
class SynthTruth:
    labels: LabelMap
    classes: tuple[str, ...]  # index id-1, "positive" | "negative"
    overlap_region_ids: frozenset[int]
    counts: RegionCount | None  # None on an empty slide

    @property
    def n_positive(self) -> int:
        return sum(1 for c in self.classes if c == "positive")


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int((a & b).sum())
    if inter == 0:
        return 0.0
    return inter / int((a | b).sum())


def _distinct_cores(a: np.ndarray, b: np.ndarray) -> bool:
    """True when the fused pair keeps two separate distance-transform cores.

    Pairs merging into a single core have no junction between the nuclei,
    which real touching nuclei (and annotators) keep visible.
    """
    from skimage.morphology import h_maxima

    union = a | b
    ys, xs = np.nonzero(union)
    crop = union[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    edt = ndi.distance_transform_edt(np.pad(crop, 1))
    peaks = h_maxima(edt, 2.0, footprint=np.ones((3, 3)))
    _, n = ndi.label(peaks, structure=np.ones((3, 3), dtype=int))
    return n >= 2


def _sample_ellipse(rng: np.random.Generator, cfg: SynthConfig, cx: float, cy: float) -> Ellipse:
    lo, hi = cfg.radius_range
    a = float(rng.uniform(lo, hi))
    b = float(rng.uniform(lo, hi))
    theta = float(rng.uniform(0.0, math.pi))
    return Ellipse(cx=cx, cy=cy, a=a, b=b, theta=theta)


def _place_nuclei(rng: np.random.Generator, cfg: SynthConfig) -> tuple[list[Ellipse], list[np.ndarray]]:
    """Rejection-sampled layout: singles first with a clearance gap, then
    overlapping nuclei attached shallowly to a single.

    Overlap centers sit at a fraction of the two support radii along the
    connecting direction, which keeps fusions neck-like (separable);
    max_pair_overlap caps the pixel IoU of every generating pair.
    """
    n = cfg.n_nuclei
    n_overlap = round(n * cfg.overlap_fraction)
    n_single = n - n_overlap
    ellipses: list[Ellipse] = []
    masks: list[np.ndarray] = []
    occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
    margin = cfg.radius_range[1]
    attempts = 0

    def try_place(want_overlap: bool) -> bool:
        nonlocal attempts, occupied
        while attempts < MAX_PLACEMENT_ATTEMPTS:
            attempts += 1
            if want_overlap and ellipses:
                anchor_count = max(1, min(n_single, len(ellipses)))
                target = ellipses[int(rng.integers(0, anchor_count))]
                lo, hi = cfg.radius_range
                a = float(rng.uniform(lo, hi))
                b = float(rng.uniform(lo, hi))
                theta = float(rng.uniform(0.0, math.pi))
                phi = float(rng.uniform(0.0, 2.0 * math.pi))
                cand_stub = Ellipse(cx=0.0, cy=0.0, a=a, b=b, theta=theta)
                reach = target.support_radius(phi) + cand_stub.support_radius(phi + math.pi)
                d = float(rng.uniform(0.80, 0.98)) * reach
                cand = Ellipse(
                    cx=target.cx + d * math.cos(phi),
                    cy=target.cy + d * math.sin(phi),
                    a=a, b=b, theta=theta,
                )
                if not (0 <= cand.cx < cfg.width and 0 <= cand.cy < cfg.height):
                    continue
            else:
                cx = float(rng.uniform(margin, cfg.width - margin))
                cy = float(rng.uniform(margin, cfg.height - margin))
                cand = _sample_ellipse(rng, cfg, cx, cy)
            mask = cand.render(cfg.width, cfg.height)
            if not mask.any():
                continue
            ious = [_mask_iou(mask, m) for m in masks]
            if any(iou > cfg.max_pair_overlap for iou in ious):
                continue
            if want_overlap:
                if not any(iou >= _MIN_PAIR_IOU for iou in ious):
                    continue
                # Every touched neighbor must stay a distinct nucleus: the
                # pair needs a visible junction (two distance-transform
                # cores), or the cluster degenerates into one blob.
                distinct = True
                for other_mask, iou in zip(masks, ious):
                    if iou > 0.0 and not _distinct_cores(mask, other_mask):
                        distinct = False
                        break
                if not distinct:
                    continue
            else:
                grown = ndi.binary_dilation(mask, iterations=_MIN_GAP)
                if (grown & occupied).any():
                    continue
            ellipses.append(cand)
            masks.append(mask)
            occupied |= mask
            return True
        return False

    for i in range(n):
        want_overlap = i >= n_single and len(ellipses) > 0
        if not try_place(want_overlap):
            raise SynthesisError(
                f"placed only {len(ellipses)}/{n} nuclei in {MAX_PLACEMENT_ATTEMPTS} attempts; "
                "lower n_nuclei or the radius range"
            )
    return ellipses, masks


def generate(cfg: SynthConfig) -> tuple[RasterImage, ProbabilityMap, SynthTruth]:
    """One synthetic slide: RGB image, probability map, and full truth."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    stains = StainVectors.hdab()
    rgb = np.full((cfg.height, cfg.width, 3), 255, dtype=np.uint8)

    if cfg.n_nuclei == 0:
        labels = LabelMap(np.zeros((cfg.height, cfg.width), dtype=np.int32))
        prob = ProbabilityMap(np.zeros((cfg.height, cfg.width)))
        truth = SynthTruth(labels=labels, classes=(), overlap_region_ids=frozenset(), counts=None)
        return RasterImage(rgb), prob, truth

    ellipses, masks = _place_nuclei(rng, cfg)
    n = len(ellipses)

    # Truth labels: overlap pixels go to the nearest ellipse center (ties
    # to the lower id since later ids need a strictly smaller distance).
    labels_arr = np.zeros((cfg.height, cfg.width), dtype=np.int32)
    best_d2 = np.full((cfg.height, cfg.width), np.inf)
    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width]
    for idx, (ell, mask) in enumerate(zip(ellipses, masks), start=1):
        d2 = (xs - ell.cx) ** 2 + (ys - ell.cy) ** 2
        claim = mask & (d2 < best_d2)
        labels_arr[claim] = idx
        best_d2[claim] = d2[claim]

    n_pos = round(cfg.positive_fraction * n)
    positive_ids = set(int(i) + 1 for i in rng.permutation(n)[:n_pos])
    classes = tuple("positive" if i in positive_ids else "negative" for i in range(1, n + 1))

    od_draws = rng.normal(0.0, cfg.stain_noise_sd, size=n)
    for i in range(1, n + 1):
        mu = 0.9 if classes[i - 1] == "positive" else 0.7
        od = max(0.05, mu + float(od_draws[i - 1]))
        vec = stains.dab if classes[i - 1] == "positive" else stains.hematoxylin
        rgb[labels_arr == i] = od_to_rgb(od * vec)

    union = labels_arr > 0
    prob_values = ndi.gaussian_filter(union.astype(np.float64), sigma=1.0)
    prob = ProbabilityMap(np.clip(prob_values, 0.0, 1.0))

    comps = connected_components(BinaryMask(union))
    overlap_ids = []
    for comp_id in range(1, comps.n_instances + 1):
        members = np.unique(labels_arr[comps.labels == comp_id])
        if len(members[members > 0]) >= 2:
            overlap_ids.append(comp_id)

    truth = SynthTruth(
        labels=LabelMap(labels_arr),
        classes=classes,
        overlap_region_ids=frozenset(overlap_ids),
        counts=RegionCount(region_id="image", n_positive=len(positive_ids), n_total=n),
    )
    return RasterImage(rgb), prob, truth


def image_seed(master_seed: int, index: int) -> int:
    """Per-image seed derived from (master seed, image index)."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def overlap_training_rows(
    truth_labels: LabelMap, prob: ProbabilityMap
) -> tuple[np.ndarray, np.ndarray]:
    """Region features and overlap labels from one image's ground truth.

    Components of the merged mask containing two or more generated nuclei
    are the overlapped class (label 1); everything else is single.
    """
    from .regions import RegionError, extract_region, feature_matrix, region_features

    union = BinaryMask(truth_labels.labels > 0)
    comps = connected_components(union)
    feats = []
    ys = []
    for k in range(1, comps.n_instances + 1):
        region = extract_region(comps, k)
        try:
            fv = region_features(region, prob)
        except RegionError:
            continue
        members = np.unique(truth_labels.labels[comps.labels == k])
        overlapped = int((members > 0).sum() >= 2)
        feats.append(fv)
        ys.append(overlapped)
    return feature_matrix(feats), np.asarray(ys, dtype=np.float64)


def export_dataset(cfg: SynthConfig, n_images: int, out_dir: str | os.PathLike) -> Path:
    """Write image/probmap/labels/truth quartets plus a manifest CSV.

    The manifest has one row per image with its seed and ground-truth
    counts; cfg.seed acts as the master seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "probmap", "labels", "truth", "seed", "n_nuclei", "n_positive", "pi"])
        for i in range(n_images):
            seed = image_seed(cfg.seed, i)
            img_cfg = SynthConfig(
                width=cfg.width,
                height=cfg.height,
                n_nuclei=cfg.n_nuclei,
                positive_fraction=cfg.positive_fraction,
                radius_range=cfg.radius_range,
                overlap_fraction=cfg.overlap_fraction,
                max_pair_overlap=cfg.max_pair_overlap,
                stain_noise_sd=cfg.stain_noise_sd,
                seed=seed,
            )
            image, prob, truth = generate(img_cfg)
            stem = f"{i:04d}"
            save_image(image, out / f"img_{stem}.png")
            save_image(quantize_probability(prob), out / f"prob_{stem}.png")
            save_label_map(truth.labels, out / f"labels_{stem}.png")
            with open(out / f"truth_{stem}.csv", "w", newline="") as tf:
                tw = csv.writer(tf)
                tw.writerow(["label", "class"])
                for k, cls in enumerate(truth.classes, start=1):
                    tw.writerow([k, cls])
            n = len(truth.classes)
            n_pos = truth.n_positive
            pi = repr(100.0 * n_pos / n) if n else ""
            writer.writerow(
                [f"img_{stem}.png", f"prob_{stem}.png", f"labels_{stem}.png", f"truth_{stem}.csv",
                 seed, n, n_pos, pi]
            )
    return manifest
