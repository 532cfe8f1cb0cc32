"""Proliferation-index scoring and manual-vs-automatic agreement.

PI is the mean over regions of interest of the positive-nucleus
percentage.  Agreement between a manual and an automatic PI series is
summarized by Pearson and Spearman correlations, the regression R^2 of
automatic on manual, and Bland-Altman limits of agreement on the
(manual - automatic) differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class ScoringError(ValueError):
    """Empty region list or degenerate agreement input."""


@dataclass(frozen=True)
class RegionCount:
    region_id: str
    n_positive: int
    n_total: int
    roi_kind: str = "other"

    def __post_init__(self) -> None:
        if self.n_total < 1:
            raise ScoringError(f"region {self.region_id}: total count must be >= 1")
        if not 0 <= self.n_positive <= self.n_total:
            raise ScoringError(f"region {self.region_id}: need 0 <= positive <= total")
        if self.roi_kind not in ("hotspot", "medium", "edge", "other"):
            raise ScoringError(f"region {self.region_id}: unknown roi kind {self.roi_kind!r}")


@dataclass(frozen=True)
class PiReport:
    pi: float
    r: int
    per_region: tuple[float, ...]


@dataclass(frozen=True)
class AgreementStats:
    pearson: float | None
    spearman: float | None
    r2: float | None
    bland_mean_diff: float
    bland_loa: tuple[float, float]


def pi_score(regions: Sequence[RegionCount]) -> PiReport:
    """Mean over regions of 100 * N_i / T_i.

    fsum keeps the mean exactly rounded, so the result is invariant under
    region permutation.
    """
    if not regions:
        raise ScoringError("PI needs at least one region of interest")
    per_region = tuple(100.0 * rc.n_positive / rc.n_total for rc in regions)
    return PiReport(pi=math.fsum(per_region) / len(per_region), r=len(regions), per_region=per_region)


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float((xc * xc).sum())
    sy = float((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        return None
    return float((xc * yc).sum() / math.sqrt(sx * sy))


def agreement(pairs: Sequence[tuple[float, float]]) -> AgreementStats:
    """Agreement statistics for (manual PI, automatic PI) pairs.

    Spearman is Pearson on average ranks; R^2 comes from least-squares
    regression of automatic on manual; Bland-Altman differences are
    manual - automatic with limits mean +/- 1.96 times the sample (n-1)
    standard deviation.  Constant series make the correlations undefined
    (None).
    """
    if len(pairs) < 3:
        raise ScoringError("agreement needs at least 3 PI pairs")
    manual = np.array([m for m, _ in pairs], dtype=np.float64)
    auto = np.array([a for _, a in pairs], dtype=np.float64)

    pearson = _pearson(manual, auto)
    spearman = _pearson(rankdata(manual), rankdata(auto))

    r2 = None
    var_manual = float(((manual - manual.mean()) ** 2).sum())
    ss_tot = float(((auto - auto.mean()) ** 2).sum())
    if var_manual > 0.0 and ss_tot > 0.0:
        slope = float(((manual - manual.mean()) * (auto - auto.mean())).sum()) / var_manual
        intercept = float(auto.mean() - slope * manual.mean())
        ss_res = float(((auto - (slope * manual + intercept)) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot

    diffs = manual - auto
    mean_diff = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return AgreementStats(
        pearson=pearson,
        spearman=spearman,
        r2=r2,
        bland_mean_diff=mean_diff,
        bland_loa=(mean_diff - 1.96 * sd, mean_diff + 1.96 * sd),
    )


def counts_from_calls(region_id: str, calls, roi_kind: str = "other") -> RegionCount | None:
    """Aggregate classify_nuclei output into a RegionCount; None if empty."""
    total = len(calls)
    if total == 0:
        return None
    positive = sum(1 for c in calls if c.label_class == "positive")
    return RegionCount(region_id=region_id, n_positive=positive, n_total=total, roi_kind=roi_kind)


def score_case(rois: Sequence[tuple[str, Sequence]]) -> PiReport:
    """PI for one case from per-ROI classification calls.

    ROIs without any classified nucleus are excluded with a warning,
    reducing r; a case with no usable ROI is an error.
    """
    counts = []
    for roi_id, calls in rois:
        rc = counts_from_calls(roi_id, calls)
        if rc is None:
            log.warning("ROI %s has no classified nuclei; excluded from PI", roi_id)
            continue
        counts.append(rc)
    if not counts:
        raise ScoringError("no ROI with classified nuclei; cannot compute PI")
    return pi_score(counts)
