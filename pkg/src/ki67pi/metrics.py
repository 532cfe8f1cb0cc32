"""Segmentation and classification evaluation.

Pixel level: accuracy, mean IoU, frequency-weighted IoU over the two-class
confusion tensor.  Object level: instance matching at IoU >= 0.5, panoptic
quality with its SQ/DQ decomposition, aggregated Jaccard index, and
ensemble Dice.  Exact conventions, including edge cases on empty maps, are
documented in docs/metrics.md and pinned by brute-force oracles in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import BinaryMask, LabelMap, _frozen


class MetricError(ValueError):
    """Dimension mismatch or invalid counts."""


@dataclass(frozen=True)
class ConfusionTensor:
    """n[i, j] = pixels of true class i predicted as class j."""

    n: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.n, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise MetricError("confusion tensor must be square")
        if (arr < 0).any():
            raise MetricError("confusion counts must be non-negative")
        object.__setattr__(self, "n", _frozen(arr))

    @property
    def n_cl(self) -> int:
        return self.n.shape[0]

    @property
    def t(self) -> np.ndarray:
        """True-class pixel totals."""
        return self.n.sum(axis=1)


@dataclass(frozen=True)
class PixelMetrics:
    acc: float
    miu: float
    fiu: float


@dataclass(frozen=True)
class MatchResult:
    """Instance matching at IoU >= 0.5; pairs are (pred id, gt id, IoU)."""

    pairs: tuple[tuple[int, int, float], ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]


@dataclass(frozen=True)
class InstanceMetrics:
    pq: float
    sq: float
    dq: float
    dice2: float | None = None
    aji: float | None = None


@dataclass(frozen=True)
class ClassificationMetrics:
    """Percentages; None marks a metric with a zero denominator."""

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    f1: float | None


def _check_same_shape(a, b) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise MetricError(f"dimension mismatch: {(a.width, a.height)} vs {(b.width, b.height)}")


def confusion_from_masks(pred: BinaryMask, gt: BinaryMask) -> ConfusionTensor:
    _check_same_shape(pred, gt)
    g = gt.bits.ravel().astype(np.int64)
    p = pred.bits.ravel().astype(np.int64)
    counts = np.bincount(g * 2 + p, minlength=4)
    return ConfusionTensor(counts.reshape(2, 2))


def pixel_metrics(pred: BinaryMask, gt: BinaryMask) -> PixelMetrics:
    """Accuracy, mean IoU, and frequency-weighted IoU.

    IoU for class i uses the union denominator t_i + sum_j n_ji - n_ii;
    the mean runs over classes present in the ground truth.
    """
    conf = confusion_from_masks(pred, gt)
    n = conf.n.astype(np.float64)
    t = n.sum(axis=1)
    predicted = n.sum(axis=0)
    total = float(t.sum())
    acc = float(np.trace(n)) / total
    present = t > 0
    denom = t + predicted - np.diag(n)
    iou = np.divide(np.diag(n), denom, out=np.zeros_like(denom), where=denom > 0)
    miu = float(iou[present].mean())
    fiu = float((t[present] * iou[present]).sum() / total)
    return PixelMetrics(acc=acc, miu=miu, fiu=fiu)


def _instance_areas(labels: np.ndarray, k: int) -> np.ndarray:
    return np.bincount(labels.ravel(), minlength=k + 1)[: k + 1]


def _pair_intersections(pred: np.ndarray, gt: np.ndarray) -> dict[tuple[int, int], int]:
    """Pixel intersections for every overlapping (pred id, gt id) pair."""
    both = (pred > 0) & (gt > 0)
    if not both.any():
        return {}
    keys = pred[both].astype(np.int64) << 32 | gt[both].astype(np.int64)
    values, counts = np.unique(keys, return_counts=True)
    return {
        (int(v >> 32), int(v & 0xFFFFFFFF)): int(c)
        for v, c in zip(values, counts)
    }


def match_instances(pred: LabelMap, gt: LabelMap) -> MatchResult:
    """One-to-one matching of instances with IoU >= 0.5.

    Pairs above 0.5 are provably unique; exact 0.5 ties are resolved by
    larger intersection, then lower gt id, then lower pred id.
    """
    _check_same_shape(pred, gt)
    pa = _instance_areas(pred.labels, pred.n_instances)
    ga = _instance_areas(gt.labels, gt.n_instances)
    inter = _pair_intersections(pred.labels, gt.labels)

    candidates = []
    for (p, g), i in inter.items():
        union = pa[p] + ga[g] - i
        iou = i / union
        if iou >= 0.5:
            candidates.append((p, g, iou, i))
    candidates.sort(key=lambda c: (-c[2], -c[3], c[1], c[0]))
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for p, g, iou, _ in candidates:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, float(iou)))
    pairs.sort(key=lambda pr: pr[1])
    fp = tuple(p for p in range(1, pred.n_instances + 1) if p not in used_p)
    fn = tuple(g for g in range(1, gt.n_instances + 1) if g not in used_g)
    return MatchResult(pairs=tuple(pairs), fp=fp, fn=fn)


def panoptic_quality(m: MatchResult) -> InstanceMetrics:
    """PQ = SQ x DQ: mean matched IoU times detection F1 at IoU >= 0.5."""
    tp = len(m.pairs)
    fp = len(m.fp)
    fn = len(m.fn)
    sq = sum(iou for _, _, iou in m.pairs) / tp if tp else 0.0
    denom = tp + 0.5 * fp + 0.5 * fn
    dq = tp / denom if denom > 0 else 0.0
    return InstanceMetrics(pq=sq * dq, sq=sq, dq=dq)


def aji(pred: LabelMap, gt: LabelMap) -> float:
    """Aggregated Jaccard index.

    Each gt instance takes the pred instance maximizing IoU (ties to the
    lower pred id); unmatched pred and gt areas join the union.  Two empty
    maps agree perfectly (1.0).
    """
    _check_same_shape(pred, gt)
    pa = _instance_areas(pred.labels, pred.n_instances)
    ga = _instance_areas(gt.labels, gt.n_instances)
    inter = _pair_intersections(pred.labels, gt.labels)

    by_gt: dict[int, list[tuple[int, int]]] = {}
    for (p, g), i in inter.items():
        by_gt.setdefault(g, []).append((p, i))

    c_sum = 0
    u_sum = 0
    used_pred: set[int] = set()
    for g in range(1, gt.n_instances + 1):
        overlaps = by_gt.get(g)
        if not overlaps:
            u_sum += int(ga[g])
            continue
        best_p, best_i = max(
            overlaps, key=lambda pi: (pi[1] / (pa[pi[0]] + ga[g] - pi[1]), -pi[0])
        )
        c_sum += best_i
        u_sum += int(pa[best_p] + ga[g] - best_i)
        used_pred.add(best_p)
    for p in range(1, pred.n_instances + 1):
        if p not in used_pred:
            u_sum += int(pa[p])
    if u_sum == 0:
        return 1.0
    return c_sum / u_sum


def dice2(pred: LabelMap, gt: LabelMap) -> float:
    """Ensemble Dice, area-weighted and symmetrized.

    Each instance pairs with its maximal-overlap counterpart (ties to the
    lower id); per-instance Dice values are averaged weighted by instance
    area, in both directions, then the two directions are averaged.
    """
    _check_same_shape(pred, gt)
    pa = _instance_areas(pred.labels, pred.n_instances)
    ga = _instance_areas(gt.labels, gt.n_instances)
    inter = _pair_intersections(pred.labels, gt.labels)

    def directed(n_from: int, a_from: np.ndarray, a_to: np.ndarray, pair_of) -> float:
        total_area = float(a_from[1:].sum())
        if total_area == 0.0:
            return 1.0 if a_to[1:].sum() == 0 else 0.0
        weighted = 0.0
        for k in range(1, n_from + 1):
            overlaps = pair_of(k)
            if overlaps:
                other, i = max(overlaps, key=lambda oi: (oi[1], -oi[0]))
                weighted += float(a_from[k]) * (2.0 * i / float(a_from[k] + a_to[other]))
        return weighted / total_area

    by_gt: dict[int, list[tuple[int, int]]] = {}
    by_pred: dict[int, list[tuple[int, int]]] = {}
    for (p, g), i in inter.items():
        by_gt.setdefault(g, []).append((p, i))
        by_pred.setdefault(p, []).append((g, i))

    forward = directed(gt.n_instances, ga, pa, lambda g: by_gt.get(g))
    backward = directed(pred.n_instances, pa, ga, lambda p: by_pred.get(p))
    return (forward + backward) / 2.0


def instance_metrics(pred: LabelMap, gt: LabelMap) -> InstanceMetrics:
    """Dice2, AJI, and PQ/SQ/DQ for one map pair."""
    pq = panoptic_quality(match_instances(pred, gt))
    return InstanceMetrics(
        pq=pq.pq, sq=pq.sq, dq=pq.dq, dice2=dice2(pred, gt), aji=aji(pred, gt)
    )


def classification_metrics(tp: int, fp: int, tn: int, fn: int) -> ClassificationMetrics:
    """Accuracy, sensitivity, specificity, F1 as percentages.

    Zero-denominator metrics come back as None rather than 0.
    """
    for name, v in (("tp", tp), ("fp", fp), ("tn", tn), ("fn", fn)):
        if v < 0:
            raise MetricError(f"{name} must be >= 0")
    total = tp + fp + tn + fn
    if total == 0:
        raise MetricError("empty confusion: total count is zero")
    accuracy = 100.0 * (tp + tn) / total
    sensitivity = 100.0 * tp / (tp + fn) if tp + fn > 0 else None
    specificity = 100.0 * tn / (tn + fp) if tn + fp > 0 else None
    f1 = 100.0 * 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else None
    return ClassificationMetrics(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=accuracy, sensitivity=sensitivity, specificity=specificity, f1=f1,
    )
