"""QuPath GeoJSON annotation ingestion.

Reads a FeatureCollection of polygon annotations with Positive/Negative
classifications, rasterizes them with even-odd fill into an instance label
map (later features paint over earlier ones), and reports unknown class
names.  Self-intersecting outlines are rejected with their feature index.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .raster import LabelMap

log = logging.getLogger(__name__)

CLASS_POSITIVE = "Positive"
CLASS_NEGATIVE = "Negative"


class AnnotationError(ValueError):
    """Malformed GeoJSON or invalid polygon geometry."""


@dataclass(frozen=True)
class AnnotationSet:
    """Closed polygons in pixel coordinates with their class names."""

    polygons: tuple[tuple[np.ndarray, str], ...]

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(cls for _, cls in self.polygons)


def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    """True when segment p1p2 crosses p3p4 at an interior point."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    o1 = orient(p1, p2, p3)
    o2 = orient(p1, p2, p4)
    o3 = orient(p3, p4, p1)
    o4 = orient(p3, p4, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def polygon_is_simple(ring: np.ndarray) -> bool:
    """Brute-force simplicity check: no two non-adjacent edges cross."""
    n = len(ring)
    edges = [(ring[i], ring[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # closing edge is adjacent to the first
            if _segments_properly_intersect(*edges[i], *edges[j]):
                return False
    return True


def _even_odd_fill(rings: list[np.ndarray], width: int, height: int) -> np.ndarray:
    """Scanline even-odd rasterization; a pixel is inside when its center
    (x + 0.5, y + 0.5) has odd crossing parity over all rings."""
    out = np.zeros((height, width), dtype=bool)
    all_y = np.concatenate([r[:, 1] for r in rings])
    y_lo = max(0, int(math.floor(all_y.min() - 0.5)))
    y_hi = min(height - 1, int(math.ceil(all_y.max() + 0.5)))
    for y in range(y_lo, y_hi + 1):
        yc = y + 0.5
        crossings = []
        for ring in rings:
            for i in range(len(ring)):
                x1, y1 = ring[i]
                x2, y2 = ring[(i + 1) % len(ring)]
                if (y1 <= yc) == (y2 <= yc):
                    continue
                crossings.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
        if not crossings:
            continue
        crossings.sort()
        for k in range(0, len(crossings) - 1, 2):
            x_start = max(0, int(math.ceil(crossings[k] - 0.5)))
            x_end = min(width - 1, int(math.floor(crossings[k + 1] - 0.5)))
            if x_start <= x_end:
                out[y, x_start : x_end + 1] = True
    return out


def _class_name(props: dict) -> str | None:
    cls = props.get("classification")
    if isinstance(cls, dict):
        cls = cls.get("name")
    if not isinstance(cls, str):
        return None
    lowered = cls.lower()
    if "positive" in lowered:
        return CLASS_POSITIVE
    if "negative" in lowered:
        return CLASS_NEGATIVE
    return cls  # unknown; caller reports it


def import_qupath_geojson(
    path: str | os.PathLike, width: int | None = None, height: int | None = None
) -> tuple[AnnotationSet, LabelMap, tuple[str, ...]]:
    """Load polygon annotations and rasterize them to an instance map.

    Returns the annotation set, a label map (feature order, 1-based,
    later features overwrite earlier on overlap), and one class per label.
    Features with unknown class names are skipped and listed in a warning.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise AnnotationError(f"{path}: not valid GeoJSON ({exc})") from exc
    if isinstance(doc, dict) and doc.get("type") == "FeatureCollection":
        features = doc.get("features", [])
    elif isinstance(doc, list):
        features = doc
    else:
        raise AnnotationError(f"{path}: expected a FeatureCollection")

    polygons: list[tuple[np.ndarray, str]] = []
    ring_groups: list[list[np.ndarray]] = []
    unknown: list[tuple[int, str | None]] = []
    for idx, feature in enumerate(features):
        geom = feature.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise AnnotationError(f"feature {idx}: unsupported geometry {geom.get('type')!r}")
        coords = geom.get("coordinates")
        if not coords or not isinstance(coords, list):
            raise AnnotationError(f"feature {idx}: polygon has no coordinate rings")
        rings = []
        for ring in coords:
            arr = np.asarray(ring, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] < 2 or len(arr) < 3:
                raise AnnotationError(f"feature {idx}: malformed ring")
            arr = arr[:, :2]
            if np.allclose(arr[0], arr[-1]):
                arr = arr[:-1]
            if len(arr) < 3:
                raise AnnotationError(f"feature {idx}: ring has fewer than 3 distinct points")
            if not polygon_is_simple(arr):
                raise AnnotationError(f"feature {idx}: self-intersecting polygon rejected")
            rings.append(arr)
        cls = _class_name(feature.get("properties") or {})
        if cls not in (CLASS_POSITIVE, CLASS_NEGATIVE):
            unknown.append((idx, cls))
            continue
        polygons.append((rings[0], cls))
        ring_groups.append(rings)

    if unknown:
        names = ", ".join(f"#{i}={c!r}" for i, c in unknown)
        log.warning("skipped %d annotation(s) with unknown class names: %s", len(unknown), names)

    if width is None or height is None:
        max_x = max_y = 0.0
        for rings in ring_groups:
            for ring in rings:
                max_x = max(max_x, float(ring[:, 0].max()))
                max_y = max(max_y, float(ring[:, 1].max()))
        width = width or max(1, int(math.ceil(max_x)))
        height = height or max(1, int(math.ceil(max_y)))

    labels = np.zeros((height, width), dtype=np.int32)
    classes: list[str] = []
    next_label = 0
    for (outer, cls), rings in zip(polygons, ring_groups):
        filled = _even_odd_fill(rings, width, height)
        if not filled.any():
            log.warning("annotation %r rasterized to zero pixels; dropped", cls)
            continue
        next_label += 1
        labels[filled] = next_label
        classes.append(cls)

    # Painting over earlier features can empty them; compact the ids.
    present = np.unique(labels)
    present = present[present > 0]
    remap = np.zeros(next_label + 1, dtype=np.int32)
    kept_classes = []
    for new_id, old_id in enumerate(sorted(int(v) for v in present), start=1):
        remap[old_id] = new_id
        kept_classes.append(classes[old_id - 1])
    labels = remap[labels]

    return AnnotationSet(polygons=tuple(polygons)), LabelMap(labels), tuple(kept_classes)
