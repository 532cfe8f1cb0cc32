"""Per-nucleus immunopositive/immunonegative classification.

Two interchangeable classifiers sit behind ``classify_nuclei``: a random
forest on handcrafted patch features, and a stain-deconvolution baseline
that thresholds the DAB-vs-hematoxylin optical-density margin.  Any object
exposing ``predict_patches`` can slot in as a replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .raster import BinaryMask, LabelMap, RasterImage, _frozen
from . import regions as regions_mod
from .rf import RfModel, rf_predict_proba

PATCH_SIZE = 32
POSITIVE = "positive"
NEGATIVE = "negative"

PATCH_FEATURE_NAMES = (
    "h_mean",
    "h_std",
    "dab_mean",
    "dab_std",
    "dab_h_ratio",
    "r_mean",
    "g_mean",
    "b_mean",
    "area",
    "circularity",
    "solidity",
    "eccentricity",
)

# Published H-DAB optical-density vectors (overridable via config).
DEFAULT_HEMATOXYLIN = (0.650, 0.704, 0.286)
DEFAULT_DAB = (0.269, 0.568, 0.778)


class StainError(ValueError):
    """Degenerate stain basis or unusable patch."""


@dataclass(frozen=True)
class StainVectors:
    """Unit optical-density vectors spanning the H-DAB color space."""

    hematoxylin: np.ndarray
    dab: np.ndarray
    residual: np.ndarray

    def __post_init__(self) -> None:
        for name in ("hematoxylin", "dab", "residual"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,):
                raise StainError(f"{name} vector must have 3 components")
            norm = float(np.linalg.norm(v))
            if norm <= 0:
                raise StainError(f"{name} vector must be nonzero")
            object.__setattr__(self, name, _frozen(v / norm))
        if np.linalg.cond(self.basis()) >= 1e6:
            raise StainError("stain basis is near-singular")

    def basis(self) -> np.ndarray:
        """Rows are the H, DAB, residual OD vectors."""
        return np.stack([self.hematoxylin, self.dab, self.residual])

    @classmethod
    def hdab(
        cls,
        hematoxylin: Sequence[float] = DEFAULT_HEMATOXYLIN,
        dab: Sequence[float] = DEFAULT_DAB,
    ) -> "StainVectors":
        h = np.asarray(hematoxylin, dtype=np.float64)
        d = np.asarray(dab, dtype=np.float64)
        return cls(hematoxylin=h, dab=d, residual=np.cross(h, d))


def rgb_to_od(rgb: np.ndarray) -> np.ndarray:
    """Optical density per channel: -log10((v + 1) / 256); white maps to ~0."""
    v = np.asarray(rgb, dtype=np.float64)
    return -np.log10((v + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Inverse transform of rgb_to_od, rounded and clipped to uint8."""
    v = 256.0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - 1.0
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


def stain_deconvolve(
    rgb: np.ndarray, stains: StainVectors | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project RGB optical densities onto the stain basis.

    Accepts a single pixel (3,) or an image (..., 3); returns per-pixel
    (h_od, dab_od, residual_od) with the input's spatial shape.
    """
    stains = stains or StainVectors.hdab()
    arr = np.asarray(rgb)
    if arr.shape[-1] != 3:
        raise StainError("expected RGB data with a trailing channel of size 3")
    od = rgb_to_od(arr)
    conc = od @ np.linalg.inv(stains.basis())
    return conc[..., 0], conc[..., 1], conc[..., 2]


@dataclass(frozen=True)
class NucleusPatch:
    """32x32 RGB crop centered on a nucleus centroid plus its mask."""

    rgb: RasterImage
    mask: BinaryMask

    def __post_init__(self) -> None:
        if (self.rgb.height, self.rgb.width) != (PATCH_SIZE, PATCH_SIZE) or self.rgb.channels != 3:
            raise StainError(f"patch rgb must be {PATCH_SIZE}x{PATCH_SIZE}x3")
        if (self.mask.height, self.mask.width) != (PATCH_SIZE, PATCH_SIZE):
            raise StainError(f"patch mask must be {PATCH_SIZE}x{PATCH_SIZE}")
        if self.mask.foreground_count == 0:
            raise StainError("patch mask is empty")


def extract_patch(labels: LabelMap, image: RasterImage, k: int) -> NucleusPatch:
    """Cut the 32x32 patch around instance k, zero-padded at image borders."""
    if image.channels != 3:
        raise StainError("patch extraction needs an RGB image")
    if (labels.height, labels.width) != (image.height, image.width):
        raise StainError("label map and image dimensions differ")
    ys, xs = np.nonzero(labels.labels == k)
    if len(ys) == 0:
        raise regions_mod.RegionError(f"label {k} not present")
    cx = int(round(float(xs.mean())))
    cy = int(round(float(ys.mean())))
    half = PATCH_SIZE // 2
    rgb = np.zeros((PATCH_SIZE, PATCH_SIZE, 3), dtype=np.uint8)
    mask = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=bool)
    x0, y0 = cx - half, cy - half
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(image.width, x0 + PATCH_SIZE), min(image.height, y0 + PATCH_SIZE)
    if sx0 >= sx1 or sy0 >= sy1:
        raise StainError(f"instance {k}: patch falls entirely outside the image")
    rgb[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = image.pixels[sy0:sy1, sx0:sx1]
    mask[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = labels.labels[sy0:sy1, sx0:sx1] == k
    if not mask.any():
        raise StainError(f"instance {k}: no nucleus pixels inside the patch window")
    return NucleusPatch(rgb=RasterImage(rgb), mask=BinaryMask(mask))


def _mask_shape_features(mask: BinaryMask) -> tuple[float, float, float]:
    """Circularity, solidity, eccentricity of the largest mask component.

    Components below 3 px have degenerate moments; report zeros for them.
    """
    comps = regions_mod.connected_components(mask)
    if comps.n_instances == 0:
        return 0.0, 0.0, 0.0
    areas = np.bincount(comps.labels.ravel())
    areas[0] = 0
    biggest = int(areas.argmax())
    region = regions_mod.extract_region(comps, biggest)
    if region.area < 3:
        return 0.0, 0.0, 0.0
    perimeter = regions_mod.contour_perimeter(region.contour)
    circularity = 4.0 * math.pi * region.area / (perimeter * perimeter)
    hull = regions_mod._pixel_corner_hull(region.pixels)
    solidity = region.area / regions_mod._polygon_area(hull)
    eccentricity = regions_mod._ellipse_eccentricity(region.pixels)
    return circularity, solidity, eccentricity


def patch_features(patch: NucleusPatch, stains: StainVectors | None = None) -> np.ndarray:
    """Twelve-entry descriptor: masked stain statistics, RGB means, shape."""
    stains = stains or StainVectors.hdab()
    h_od, dab_od, _ = stain_deconvolve(patch.rgb.pixels, stains)
    m = patch.mask.bits
    h_vals = h_od[m]
    dab_vals = dab_od[m]
    rgb = patch.rgb.pixels[m].astype(np.float64)
    h_mean = float(h_vals.mean())
    dab_mean = float(dab_vals.mean())
    circ, sol, ecc = _mask_shape_features(patch.mask)
    return np.array(
        [
            h_mean,
            float(h_vals.std()),
            dab_mean,
            float(dab_vals.std()),
            dab_mean / (h_mean + 1e-6),
            float(rgb[:, 0].mean()),
            float(rgb[:, 1].mean()),
            float(rgb[:, 2].mean()),
            float(patch.mask.foreground_count),
            circ,
            sol,
            ecc,
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class NucleusCall:
    label: int
    label_class: str  # "positive" | "negative"
    confidence: float


@dataclass(frozen=True)
class StainBaseline:
    """Thresholds the masked mean DAB-vs-H optical-density margin."""

    stains: StainVectors

    @classmethod
    def hdab(cls) -> "StainBaseline":
        return cls(stains=StainVectors.hdab())

    def predict_patches(self, patches: Sequence[NucleusPatch]) -> np.ndarray:
        """Positive-class probability: sigmoid of the mean DAB OD margin."""
        probs = np.empty(len(patches), dtype=np.float64)
        for i, patch in enumerate(patches):
            h_od, dab_od, _ = stain_deconvolve(patch.rgb.pixels, self.stains)
            margin = float(dab_od[patch.mask.bits].mean() - h_od[patch.mask.bits].mean())
            probs[i] = 1.0 / (1.0 + math.exp(-margin))
        return probs


@dataclass(frozen=True)
class RfNucleusClassifier:
    """Adapts an RfModel plus stain vectors to the patch interface."""

    model: RfModel
    stains: StainVectors

    def predict_patches(self, patches: Sequence[NucleusPatch]) -> np.ndarray:
        feats = np.stack([patch_features(p, self.stains) for p in patches])
        return rf_predict_proba(self.model, feats)


def patch_dataset_from_labels(
    labels: LabelMap,
    image: RasterImage,
    classes: Sequence[str],
    stains: StainVectors | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Patch features plus 0/1 labels for every instance with a known class.

    ``classes[k-1]`` names instance k; label 1 means positive.
    """
    stains = stains or StainVectors.hdab()
    feats = []
    ys = []
    for k in range(1, labels.n_instances + 1):
        cls = classes[k - 1].lower()
        if cls not in (POSITIVE, NEGATIVE):
            raise StainError(f"instance {k}: unknown class {classes[k - 1]!r}")
        patch = extract_patch(labels, image, k)
        feats.append(patch_features(patch, stains))
        ys.append(1.0 if cls == POSITIVE else 0.0)
    x = np.stack(feats) if feats else np.empty((0, len(PATCH_FEATURE_NAMES)))
    return x, np.asarray(ys, dtype=np.float64)


def classify_nuclei(
    labels: LabelMap, image: RasterImage, classifier
) -> list[NucleusCall]:
    """Classify every instance of the label map; one record per instance.

    ``classifier`` is any object with ``predict_patches``; see
    StainBaseline and RfNucleusClassifier.
    """
    if labels.n_instances == 0:
        return []
    ids = list(range(1, labels.n_instances + 1))
    patches = [extract_patch(labels, image, k) for k in ids]
    p_pos = classifier.predict_patches(patches)
    calls = []
    for k, p in zip(ids, p_pos):
        positive = p >= 0.5
        calls.append(
            NucleusCall(
                label=k,
                label_class=POSITIVE if positive else NEGATIVE,
                confidence=float(p if positive else 1.0 - p),
            )
        )
    return calls
