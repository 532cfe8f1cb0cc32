"""Batch front-end plumbing: configuration, the per-image pipeline pass,
directory evaluation, overlay rendering, and run manifests.

Each run writes a machine-readable run_manifest.json (inputs, config hash,
package version, seeds) so any output can be reproduced exactly.  Output
rows are always ordered by image name, then label id, making CSV and PNG
outputs independent of the worker-thread count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .classify import (
    NucleusCall,
    RfNucleusClassifier,
    StainBaseline,
    StainVectors,
    classify_nuclei,
)
from .gbdt import GbdtModel, gbdt_load
from .metrics import instance_metrics, pixel_metrics
from .postproc import PostprocParams, clean_mask
from .raster import (
    BinaryMask,
    LabelMap,
    RasterImage,
    load_image,
    load_label_map,
    save_image,
    save_label_map,
    to_probability,
)
from .regions import extract_region
from .rf import RfModel, rf_load
from .scoring import PiReport, score_case
from .separate import SeparationParams, SeparationReport, separate_all_with_report

log = logging.getLogger(__name__)

THREADS_ENV_VAR = "KI67PI_THREADS"

POSITIVE_RGB = (220, 20, 20)
NEGATIVE_RGB = (20, 160, 20)


class PipelineError(RuntimeError):
    """A pipeline stage failed for one image."""


class MissingInputError(FileNotFoundError):
    """An input path does not exist or cannot be read."""


DEFAULT_CONFIG: dict = {
    "postproc": {"window": 61, "offset": -0.02, "open_radius": 1, "min_area": 30},
    "separation": {
        "kernel": [1, 1],
        "contour_min": 10,
        "dilate_radius": 1,
        "splitter": "proposed",
    },
    "classifier": {"kind": "baseline", "model": None},
    "overlap_model": None,
    "stains": {
        "hematoxylin": [0.650, 0.704, 0.286],
        "dab": [0.269, 0.568, 0.778],
    },
    "threads": 1,
}


@dataclass(frozen=True)
class PipelineConfig:
    postproc: PostprocParams
    separation: SeparationParams
    classifier_kind: str  # "rf" | "baseline"
    classifier_model: str | None
    overlap_model: str | None
    stains: StainVectors
    threads: int
    resolved: dict

    def config_hash(self) -> str:
        return config_sha256(self.resolved)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        elif value is not None:
            out[key] = value
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Resolve defaults, config file, and flag overrides (in that order)."""
    resolved = dict(DEFAULT_CONFIG)
    if path is not None:
        if not Path(path).is_file():
            raise MissingInputError(f"config file not found: {path}")
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping")
        resolved = _merge(resolved, loaded)
    if overrides:
        resolved = _merge(resolved, overrides)

    threads = resolved["threads"]
    env_threads = os.environ.get(THREADS_ENV_VAR)
    if env_threads:
        threads = int(env_threads)
    threads = max(1, int(threads))
    resolved["threads"] = threads

    classifier = resolved["classifier"]
    kind = classifier.get("kind", "baseline")
    if kind not in ("rf", "baseline"):
        raise ValueError(f"classifier.kind must be rf or baseline, got {kind!r}")
    stains_cfg = resolved["stains"]
    return PipelineConfig(
        postproc=PostprocParams(**resolved["postproc"]),
        separation=SeparationParams(
            kernel=tuple(resolved["separation"]["kernel"]),
            contour_min=resolved["separation"]["contour_min"],
            dilate_radius=resolved["separation"]["dilate_radius"],
            splitter=resolved["separation"]["splitter"],
        ),
        classifier_kind=kind,
        classifier_model=classifier.get("model"),
        overlap_model=resolved["overlap_model"],
        stains=StainVectors.hdab(stains_cfg["hematoxylin"], stains_cfg["dab"]),
        threads=threads,
        resolved=resolved,
    )


@dataclass(frozen=True)
class LoadedModels:
    detector: GbdtModel
    classifier: RfNucleusClassifier | StainBaseline


def load_models(cfg: PipelineConfig) -> LoadedModels:
    """Load and version-check the model files referenced by the config."""
    if not cfg.overlap_model:
        raise MissingInputError("config sets no overlap_model path")
    if not Path(cfg.overlap_model).is_file():
        raise MissingInputError(f"overlap model not found: {cfg.overlap_model}")
    detector = gbdt_load(cfg.overlap_model)
    if cfg.classifier_kind == "rf":
        if not cfg.classifier_model:
            raise MissingInputError("classifier.kind is rf but no model path is set")
        if not Path(cfg.classifier_model).is_file():
            raise MissingInputError(f"classifier model not found: {cfg.classifier_model}")
        rf_model: RfModel = rf_load(cfg.classifier_model)
        classifier: RfNucleusClassifier | StainBaseline = RfNucleusClassifier(rf_model, cfg.stains)
    else:
        classifier = StainBaseline(stains=cfg.stains)
    return LoadedModels(detector=detector, classifier=classifier)


def load_probability(path: str | os.PathLike):
    img = load_image(path)
    return to_probability(img)


def render_overlay(image: RasterImage, labels: LabelMap, calls: list[NucleusCall]) -> RasterImage:
    """Draw nucleus contours on the RGB image: positive red, negative green."""
    if image.channels == 3:
        canvas = np.array(image.pixels)
    else:
        canvas = np.stack([np.asarray(image.pixels, dtype=np.uint8)] * 3, axis=-1)
    class_of = {c.label: c.label_class for c in calls}
    for k in range(1, labels.n_instances + 1):
        region = extract_region(labels, k)
        color = POSITIVE_RGB if class_of.get(k) == "positive" else NEGATIVE_RGB
        canvas[region.contour[:, 1], region.contour[:, 0]] = color
    return RasterImage(canvas)


def config_sha256(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_run_manifest(
    out_dir: Path, command: str, inputs: dict, config: dict, outputs: list[str],
    seeds: dict | None = None,
) -> None:
    doc = {
        "command": command,
        "inputs": inputs,
        "config": config,
        "config_sha256": config_sha256(config),
        "package_version": __version__,
        "seeds": seeds or {},
        "outputs": sorted(outputs),
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def process_image(
    cfg: PipelineConfig,
    models: LoadedModels,
    image_path: Path,
    prob_path: Path,
    out_dir: Path,
    stem: str,
) -> dict:
    """Full pass for one image; writes labels, CSVs, PI report, overlay."""
    for p in (image_path, prob_path):
        if not Path(p).is_file():
            raise MissingInputError(f"input not found: {p}")
    image = load_image(image_path)
    prob = load_probability(prob_path)
    if (prob.height, prob.width) != (image.height, image.width):
        raise PipelineError(f"{stem}: image and probability map dimensions differ")

    mask = clean_mask(prob, cfg.postproc)
    report: SeparationReport = separate_all_with_report(mask, prob, models.detector, cfg.separation)
    labels = report.labels
    calls = classify_nuclei(labels, image, models.classifier)

    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    labels_path = out_dir / f"{stem}_labels.png"
    save_label_map(labels, labels_path)
    outputs.append(labels_path.name)

    nuclei_path = out_dir / f"{stem}_nuclei.csv"
    with open(nuclei_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "centroid_x", "centroid_y", "area", "class", "confidence"])
        for call in calls:
            ys, xs = np.nonzero(labels.labels == call.label)
            writer.writerow(
                [
                    call.label,
                    _fmt(float(xs.mean())),
                    _fmt(float(ys.mean())),
                    len(xs),
                    call.label_class,
                    _fmt(call.confidence),
                ]
            )
    outputs.append(nuclei_path.name)

    regions_path = out_dir / f"{stem}_regions.csv"
    with open(regions_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "n_seeds", "split_applied", "detector_probability"])
        for oc in report.outcomes:
            writer.writerow(
                [oc.region, oc.n_seeds, int(oc.split_applied), _fmt(oc.detector_probability)]
            )
    outputs.append(regions_path.name)

    pi_path = out_dir / f"{stem}_pi.csv"
    pi_report: PiReport | None = None
    if calls:
        pi_report = score_case([("image", calls)])
    else:
        log.warning("%s: no nuclei detected; PI undefined", stem)
    n_pos = sum(1 for c in calls if c.label_class == "positive")
    with open(pi_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi", "n_positive", "n_total", "pi"])
        writer.writerow(["image", n_pos, len(calls), _fmt(pi_report.pi if pi_report else None)])
    outputs.append(pi_path.name)

    overlay_path = out_dir / f"{stem}_overlay.png"
    save_image(render_overlay(image, labels, calls), overlay_path)
    outputs.append(overlay_path.name)

    return {
        "image": stem,
        "n_nuclei": len(calls),
        "n_positive": n_pos,
        "pi": pi_report.pi if pi_report else None,
        "outputs": outputs,
    }


def matched_stems(image_dir: Path, prob_dir: Path) -> list[tuple[str, Path, Path]]:
    """Pair same-named PNGs across two directories; mismatches are errors."""
    images = {p.name: p for p in sorted(image_dir.glob("*.png"))}
    probs = {p.name: p for p in sorted(prob_dir.glob("*.png"))}
    missing = sorted(set(images) ^ set(probs))
    if missing:
        raise MissingInputError(f"unmatched files between {image_dir} and {prob_dir}: {missing}")
    if not images:
        raise MissingInputError(f"no PNG files in {image_dir}")
    return [(Path(name).stem, images[name], probs[name]) for name in sorted(images)]


def run_batch(cfg: PipelineConfig, models: LoadedModels, jobs, out_dir: Path) -> tuple[list[dict], list[str]]:
    """Run process_image over (stem, image, prob) jobs with a worker pool.

    Results come back ordered by stem regardless of thread count; failures
    are collected, not raised.
    """
    results: list[dict] = []
    failures: list[str] = []

    def run_one(job):
        stem, image_path, prob_path = job
        return process_image(cfg, models, image_path, prob_path, out_dir, stem)

    jobs = sorted(jobs, key=lambda j: j[0])
    if cfg.threads == 1:
        for job in jobs:
            try:
                results.append(run_one(job))
            except Exception as exc:  # noqa: BLE001 - per-image isolation
                failures.append(f"{job[0]}: {exc}")
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = {pool.submit(run_one, job): job[0] for job in jobs}
            by_stem: dict[str, dict] = {}
            for future, stem in futures.items():
                try:
                    by_stem[stem] = future.result()
                except Exception as exc:  # noqa: BLE001
                    failures.append(f"{stem}: {exc}")
            results = [by_stem[s] for s in sorted(by_stem)]
    results.sort(key=lambda r: r["image"])
    return results, sorted(failures)


def binarize(labels: LabelMap) -> BinaryMask:
    return BinaryMask(labels.labels > 0)


METRIC_COLUMNS = ("dice2", "aji", "pq", "sq", "dq", "acc", "miu", "fiu")


def evaluate_directories(pred_dir: Path, gt_dir: Path) -> list[dict]:
    """Per-image metric rows for same-named label PNGs, plus a mean row."""
    preds = {p.name: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.name: p for p in sorted(gt_dir.glob("*.png"))}
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        raise MissingInputError(f"unmatched files between {pred_dir} and {gt_dir}: {missing}")
    if not preds:
        raise MissingInputError(f"no label maps found in {pred_dir}")
    rows = []
    for name in sorted(preds):
        pred = load_label_map(preds[name])
        gt = load_label_map(gts[name])
        inst = instance_metrics(pred, gt)
        pix = pixel_metrics(binarize(pred), binarize(gt))
        rows.append(
            {
                "image": name,
                "dice2": inst.dice2,
                "aji": inst.aji,
                "pq": inst.pq,
                "sq": inst.sq,
                "dq": inst.dq,
                "acc": pix.acc,
                "miu": pix.miu,
                "fiu": pix.fiu,
            }
        )
    mean_row = {"image": "mean"}
    for col in METRIC_COLUMNS:
        mean_row[col] = float(np.mean([r[col] for r in rows]))
    rows.append(mean_row)
    return rows


def write_metric_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image",) + METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["image"]] + [_fmt(row[c]) for c in METRIC_COLUMNS])
