"""Connected components, contour tracing, and the region descriptor used to
tell single-nucleus regions from overlapped ones.

The descriptor has eight entries: area, perimeter, circularity, solidity,
eccentricity, extent, max concavity depth, and the standard deviation of
the probability values inside the region.  Concavity and solidity carry
most of the signal for overlap detection: a fused pair of nuclei has a
waist that a single convex nucleus lacks.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import ConvexHull

from .postproc import EIGHT
from .raster import BinaryMask, LabelMap, ProbabilityMap, _frozen

FEATURE_NAMES = (
    "area",
    "perimeter",
    "circularity",
    "solidity",
    "eccentricity",
    "extent",
    "concavity",
    "intensity_std",
)


class RegionError(ValueError):
    """Missing label or region unusable for feature extraction."""


@dataclass(frozen=True)
class Region:
    """One 8-connected component of a mask.

    ``pixels`` is (n, 2) int32 in (x, y) raster order; ``bbox`` is
    (x0, y0, x1, y1) inclusive; ``contour`` is the Moore-neighbor boundary
    trace as an ordered closed pixel polygon (first == last for regions of
    two or more pixels, a single entry otherwise).
    """

    label: int
    pixels: np.ndarray
    bbox: tuple[int, int, int, int]
    contour: np.ndarray
    area: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", _frozen(np.asarray(self.pixels, dtype=np.int32)))
        object.__setattr__(self, "contour", _frozen(np.asarray(self.contour, dtype=np.int32)))

    def mask_patch(self) -> BinaryMask:
        """Region rendered as a binary mask over its bounding box."""
        x0, y0, x1, y1 = self.bbox
        patch = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        patch[self.pixels[:, 1] - y0, self.pixels[:, 0] - x0] = True
        return BinaryMask(patch)


@dataclass(frozen=True)
class FeatureVector:
    area: float
    perimeter: float
    circularity: float
    solidity: float
    eccentricity: float
    extent: float
    concavity: float
    intensity_std: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.area,
                self.perimeter,
                self.circularity,
                self.solidity,
                self.eccentricity,
                self.extent,
                self.concavity,
                self.intensity_std,
            ],
            dtype=np.float64,
        )


def connected_components(m: BinaryMask) -> LabelMap:
    """Label 8-connected foreground components 1..K in raster-scan order
    of each component's first pixel."""
    raw, n = ndi.label(m.bits, structure=EIGHT)
    if n == 0:
        return LabelMap(raw.astype(np.int32))
    flat = raw.ravel()
    values, first = np.unique(flat, return_index=True)
    nonzero = values > 0
    order = np.argsort(first[nonzero], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[values[nonzero][order]] = np.arange(1, n + 1, dtype=np.int32)
    return LabelMap(remap[raw])


# Moore neighborhood in clockwise order (screen coordinates, y down).
_CLOCKWISE = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))
_DIR_INDEX = {d: i for i, d in enumerate(_CLOCKWISE)}


def _moore_trace(inside, start: tuple[int, int], max_steps: int) -> list[tuple[int, int]]:
    """Moore-neighbor boundary trace from the raster-first pixel.

    The backtrack pointer holds the last background pixel examined.  The
    walk stops when it is about to repeat its first move (start pixel to
    second contour pixel), which closes the polygon; re-entry state alone
    is not reliable because the returning approach may differ from the
    initial raster-scan entry.
    """
    sx, sy = start
    contour = [start]
    current = start
    backtrack = (sx - 1, sy)  # raster scan enters from the west
    second: tuple[int, int] | None = None
    for _ in range(max_steps):
        bdir = (backtrack[0] - current[0], backtrack[1] - current[1])
        scan = _DIR_INDEX[bdir]
        found = None
        for step in range(1, 9):
            d = _CLOCKWISE[(scan + step) % 8]
            cand = (current[0] + d[0], current[1] + d[1])
            if inside(cand):
                found = cand
                break
            backtrack = cand
        if found is None:
            return contour  # isolated pixel
        if current == start and found == second:
            return contour  # contour already ends at start
        contour.append(found)
        if second is None:
            second = found
        current = found
    raise RegionError("contour trace failed to terminate")  # pragma: no cover


def extract_region(labels: LabelMap, k: int) -> Region:
    """Build the Region record for instance k of a label map."""
    if k < 1 or k > labels.n_instances:
        raise RegionError(f"label {k} not present (map has {labels.n_instances} instances)")
    ys, xs = np.nonzero(labels.labels == k)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    pixels = np.column_stack([xs, ys]).astype(np.int32)

    member = set(zip(xs.tolist(), ys.tolist()))
    start = (int(xs[0]), int(ys[0]))  # np.nonzero yields raster order
    # The walk closes within two boundary revolutions; 16 states per pixel
    # comfortably bounds that.
    contour = _moore_trace(lambda p: p in member, start, max_steps=16 * len(pixels) + 32)
    return Region(
        label=k,
        pixels=pixels,
        bbox=(x0, y0, x1, y1),
        contour=np.array(contour, dtype=np.int32),
        area=len(pixels),
    )


def contour_perimeter(contour: np.ndarray) -> float:
    """Walk length of the closed contour; diagonal steps weigh sqrt(2)."""
    if len(contour) < 2:
        return 0.0
    steps = np.diff(contour.astype(np.int64), axis=0)
    diag = np.abs(steps).sum(axis=1) == 2
    return float(np.count_nonzero(~diag) + math.sqrt(2.0) * np.count_nonzero(diag))


def _pixel_corner_hull(pixels: np.ndarray) -> np.ndarray:
    """Convex hull vertices (counterclockwise) over the pixel-square corners.

    Using corners instead of centers keeps hull area >= pixel count, so
    solidity stays in (0, 1].
    """
    px = pixels.astype(np.float64)
    corners = np.concatenate(
        [px + (dx, dy) for dx in (-0.5, 0.5) for dy in (-0.5, 0.5)], axis=0
    )
    hull = ConvexHull(corners)
    return corners[hull.vertices]


def _polygon_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _max_depth_inside_hull(points: np.ndarray, hull_vertices: np.ndarray) -> float:
    """Deepest convexity defect: max distance from a contour point to the
    hull boundary."""
    a = hull_vertices
    b = np.roll(hull_vertices, -1, axis=0)
    ab = b - a
    ab_len2 = (ab * ab).sum(axis=1)
    depth = 0.0
    for p in points.astype(np.float64):
        ap = p - a
        t = np.clip((ap * ab).sum(axis=1) / ab_len2, 0.0, 1.0)
        closest = a + t[:, None] * ab
        d = np.sqrt(((p - closest) ** 2).sum(axis=1)).min()
        depth = max(depth, float(d))
    return depth


def _ellipse_eccentricity(pixels: np.ndarray) -> float:
    """Eccentricity of the moment-equivalent ellipse.

    Each pixel counts as a unit square (adds 1/12 per-axis variance), so a
    one-pixel-wide line stays strictly below 1 and axis-aligned rectangles
    match their continuous moments exactly.
    """
    pts = pixels.astype(np.float64)
    centered = pts - pts.mean(axis=0)
    cxx = float((centered[:, 0] ** 2).mean()) + 1.0 / 12.0
    cyy = float((centered[:, 1] ** 2).mean()) + 1.0 / 12.0
    cxy = float((centered[:, 0] * centered[:, 1]).mean())
    common = math.sqrt((cxx - cyy) ** 2 + 4.0 * cxy * cxy)
    lam1 = (cxx + cyy + common) / 2.0
    lam2 = (cxx + cyy - common) / 2.0
    if lam1 <= 0.0:
        return 0.0
    return math.sqrt(max(0.0, 1.0 - lam2 / lam1))


def region_features(r: Region, p: ProbabilityMap) -> FeatureVector:
    """Compute the eight-entry descriptor for one region."""
    if r.area < 3:
        raise RegionError(f"region {r.label}: area {r.area} < 3, moments degenerate")
    x0, y0, x1, y1 = r.bbox
    if x0 < 0 or y0 < 0 or x1 >= p.width or y1 >= p.height:
        raise RegionError(f"region {r.label} exceeds probability-map bounds")

    area = float(r.area)
    perimeter = contour_perimeter(r.contour)
    circularity = 4.0 * math.pi * area / (perimeter * perimeter)
    hull = _pixel_corner_hull(r.pixels)
    solidity = area / _polygon_area(hull)
    extent = area / float((x1 - x0 + 1) * (y1 - y0 + 1))
    concavity = _max_depth_inside_hull(r.contour, hull)
    values = p.values[r.pixels[:, 1], r.pixels[:, 0]]
    return FeatureVector(
        area=area,
        perimeter=perimeter,
        circularity=circularity,
        solidity=solidity,
        eccentricity=_ellipse_eccentricity(r.pixels),
        extent=extent,
        concavity=concavity,
        intensity_std=float(values.std()),
    )


def write_feature_csv(
    path: str | os.PathLike, rows: Iterable[tuple[int, FeatureVector]]
) -> None:
    """Dump labeled feature vectors as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("label",) + FEATURE_NAMES)
        for label, fv in rows:
            writer.writerow([label] + [repr(v) for v in fv.as_array().tolist()])


def feature_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    """Stack feature vectors into an (n, 8) float matrix."""
    if not vectors:
        return np.empty((0, len(FEATURE_NAMES)), dtype=np.float64)
    return np.stack([fv.as_array() for fv in vectors])
