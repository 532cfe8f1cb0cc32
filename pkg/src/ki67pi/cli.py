"""Batch command-line front end.

Exit codes are stable: 0 success, 1 usage error, 2 missing or unreadable
input, 3 model or version error, 4 processing failure.
"""

from __future__ import annotations

import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

import click
import numpy as np

from .classify import (
    NucleusCall,
    PATCH_SIZE,
    StainError,
    classify_nuclei,
    patch_dataset_from_labels,
    patch_features,
)
from .gbdt import GbdtParams, ModelFormatError, gbdt_predict_batch, gbdt_save, gbdt_train
from .pipeline import (
    MissingInputError,
    PipelineError,
    evaluate_directories,
    load_config,
    load_models,
    load_probability,
    matched_stems,
    process_image,
    run_batch,
    write_metric_csv,
    write_run_manifest,
)
from .qupath import AnnotationError, import_qupath_geojson
from .raster import (
    BinaryMask,
    RasterError,
    load_image,
    load_label_map,
    save_label_map,
)
from .regions import FEATURE_NAMES
from .rf import RfParams, rf_save, rf_train
from .scoring import RegionCount, ScoringError, agreement, pi_score
from .separate import SeparationParams, separate_all_with_report
from .synth import SynthConfig, SynthesisError, export_dataset, overlap_training_rows

log = logging.getLogger(__name__)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool) -> None:
    """Ki-67 proliferation-index pipeline."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command("synth")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--count", type=int, default=1, show_default=True, help="Images to generate.")
@click.option("--width", type=int, default=256, show_default=True)
@click.option("--height", type=int, default=256, show_default=True)
@click.option("--n-nuclei", type=int, default=40, show_default=True)
@click.option("--positive-fraction", type=float, default=0.25, show_default=True)
@click.option("--radius-min", type=float, default=8.0, show_default=True)
@click.option("--radius-max", type=float, default=16.0, show_default=True)
@click.option("--overlap-fraction", type=float, default=0.3, show_default=True)
@click.option("--max-pair-overlap", type=float, default=0.3, show_default=True)
@click.option("--stain-noise-sd", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_synth(out, count, width, height, n_nuclei, positive_fraction, radius_min,
              radius_max, overlap_fraction, max_pair_overlap, stain_noise_sd, seed):
    """Generate a synthetic H-DAB dataset with ground truth."""
    cfg = SynthConfig(
        width=width, height=height, n_nuclei=n_nuclei,
        positive_fraction=positive_fraction, radius_range=(radius_min, radius_max),
        overlap_fraction=overlap_fraction, max_pair_overlap=max_pair_overlap,
        stain_noise_sd=stain_noise_sd, seed=seed,
    )
    manifest = export_dataset(cfg, count, out)
    write_run_manifest(
        Path(out), "synth", {"count": count}, cfg.__dict__ | {"radius_range": list(cfg.radius_range)},
        [manifest.name], seeds={"master": seed},
    )
    click.echo(f"wrote {count} image(s) under {out}")


def _read_manifest(data_dir: Path) -> list[dict]:
    manifest = data_dir / "manifest.csv"
    if not manifest.is_file():
        raise MissingInputError(f"no manifest.csv under {data_dir} (expected a synth dataset)")
    with open(manifest, newline="") as fh:
        return list(csv.DictReader(fh))


@cli.command("train-overlap")
@click.option("--data", type=click.Path(path_type=Path), required=True,
              help="Synthetic dataset directory (from the synth command).")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Model file to write.")
@click.option("--n-trees", type=int, default=200, show_default=True)
@click.option("--max-depth", type=int, default=3, show_default=True)
@click.option("--learning-rate", type=float, default=0.1, show_default=True)
@click.option("--min-leaf", type=int, default=5, show_default=True)
@click.option("--subsample", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--holdout", type=float, default=0.3, show_default=True,
              help="Fraction of regions held out for the accuracy report.")
def cmd_train_overlap(data, out, n_trees, max_depth, learning_rate, min_leaf, subsample, seed, holdout):
    """Train the overlapped-region detector on synthetic ground truth."""
    rows = _read_manifest(data)
    xs, ys = [], []
    for row in rows:
        labels = load_label_map(data / row["labels"])
        prob = load_probability(data / row["probmap"])
        x, y = overlap_training_rows(labels, prob)
        if len(x):
            xs.append(x)
            ys.append(y)
    if not xs:
        raise PipelineError("dataset produced no training regions")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    params = GbdtParams(n_trees=n_trees, max_depth=max_depth, learning_rate=learning_rate,
                        min_leaf=min_leaf, subsample=subsample, seed=seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(x))
    n_test = int(round(holdout * len(x)))
    test, train = order[:n_test], order[n_test:]
    model = gbdt_train(x[train], y[train], params, feature_names=FEATURE_NAMES)
    gbdt_save(model, out)
    msg = f"trained on {len(train)} regions"
    if n_test:
        acc = float(((gbdt_predict_batch(model, x[test]) >= 0.5) == (y[test] == 1.0)).mean())
        msg += f"; held-out accuracy {acc:.4f} on {n_test} regions"
    click.echo(f"{msg}; model written to {out}")


def _patch_dir_dataset(patch_dir: Path):
    """dataset/{positive,negative}/*.png layout; the mask is the non-white area."""
    xs, ys = [], []
    for cls, label in (("negative", 0.0), ("positive", 1.0)):
        sub = patch_dir / cls
        if not sub.is_dir():
            raise MissingInputError(f"missing class directory {sub}")
        for png in sorted(sub.glob("*.png")):
            img = load_image(png)
            if img.channels != 3 or (img.height, img.width) != (PATCH_SIZE, PATCH_SIZE):
                raise RasterError(f"{png}: patches must be {PATCH_SIZE}x{PATCH_SIZE} RGB")
            mask = (img.pixels < 245).any(axis=2)
            if not mask.any():
                mask = np.ones((PATCH_SIZE, PATCH_SIZE), dtype=bool)
            from .classify import NucleusPatch

            xs.append(patch_features(NucleusPatch(rgb=img, mask=BinaryMask(mask))))
            ys.append(label)
    return np.stack(xs), np.asarray(ys)


@cli.command("train-classifier")
@click.option("--data", type=click.Path(path_type=Path),
              help="Synthetic dataset directory (from the synth command).")
@click.option("--patch-dir", type=click.Path(path_type=Path),
              help="Patch dataset directory with positive/ and negative/ subdirs.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--n-trees", type=int, default=200, show_default=True)
@click.option("--max-depth", type=int, default=12, show_default=True)
@click.option("--min-leaf", type=int, default=2, show_default=True)
@click.option("--mtry", type=int, default=None)
@click.option("--seed", type=int, default=42, show_default=True)
def cmd_train_classifier(data, patch_dir, out, n_trees, max_depth, min_leaf, mtry, seed):
    """Train the positive/negative nucleus random forest."""
    if (data is None) == (patch_dir is None):
        raise click.UsageError("pass exactly one of --data or --patch-dir")
    if data is not None:
        rows = _read_manifest(Path(data))
        xs, ys = [], []
        for row in rows:
            labels = load_label_map(Path(data) / row["labels"])
            image = load_image(Path(data) / row["image"])
            with open(Path(data) / row["truth"], newline="") as fh:
                classes = [r["class"] for r in csv.DictReader(fh)]
            x, y = patch_dataset_from_labels(labels, image, classes)
            if len(x):
                xs.append(x)
                ys.append(y)
        if not xs:
            raise PipelineError("dataset produced no training patches")
        x, y = np.concatenate(xs), np.concatenate(ys)
    else:
        x, y = _patch_dir_dataset(Path(patch_dir))
    params = RfParams(n_trees=n_trees, max_depth=max_depth, min_leaf=min_leaf, mtry=mtry, seed=seed)
    model = rf_train(x, y, params)
    rf_save(model, out)
    oob = "n/a" if model.oob_accuracy is None else f"{model.oob_accuracy:.4f}"
    click.echo(f"trained on {len(x)} patches; OOB accuracy {oob}; model written to {out}")


@cli.command("separate")
@click.option("--mask", "mask_path", type=click.Path(path_type=Path), required=True,
              help="Binary mask PNG (or probability map with --threshold).")
@click.option("--prob", "prob_path", type=click.Path(path_type=Path), required=True)
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True)
@click.option("--out-labels", type=click.Path(path_type=Path), required=True)
@click.option("--out-csv", type=click.Path(path_type=Path), required=True)
@click.option("--splitter", type=click.Choice(["proposed", "dtw", "gmm"]), default="proposed",
              show_default=True)
def cmd_separate(mask_path, prob_path, model_path, out_labels, out_csv, splitter):
    """Split overlapped regions of a mask into nucleus instances."""
    from .gbdt import gbdt_load

    for p in (mask_path, prob_path, model_path):
        if not Path(p).is_file():
            raise MissingInputError(f"input not found: {p}")
    mask_img = load_image(mask_path)
    if mask_img.channels != 1:
        raise RasterError(f"{mask_path}: mask must be single-channel")
    mask = BinaryMask(mask_img.pixels > 0)
    prob = load_probability(prob_path)
    detector = gbdt_load(model_path)
    report = separate_all_with_report(mask, prob, detector, SeparationParams(splitter=splitter))
    save_label_map(report.labels, out_labels)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "n_seeds", "split_applied", "detector_probability"])
        for oc in report.outcomes:
            prob_txt = "NA" if oc.detector_probability is None else repr(oc.detector_probability)
            writer.writerow([oc.region, oc.n_seeds, int(oc.split_applied), prob_txt])
    click.echo(f"{report.labels.n_instances} instance(s) written to {out_labels}")


@cli.command("classify")
@click.option("--labels", "labels_path", type=click.Path(path_type=Path), required=True)
@click.option("--image", "image_path", type=click.Path(path_type=Path), required=True)
@click.option("--model", "model_path", type=click.Path(path_type=Path),
              help="Random-forest model file; omit for the stain baseline.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
def cmd_classify(labels_path, image_path, model_path, out):
    """Classify labeled nuclei as Positive or Negative."""
    from .classify import RfNucleusClassifier, StainBaseline, StainVectors
    from .rf import rf_load

    for p in (labels_path, image_path):
        if not Path(p).is_file():
            raise MissingInputError(f"input not found: {p}")
    labels = load_label_map(labels_path)
    image = load_image(image_path)
    stains = StainVectors.hdab()
    if model_path is not None:
        if not Path(model_path).is_file():
            raise MissingInputError(f"model not found: {model_path}")
        classifier = RfNucleusClassifier(rf_load(model_path), stains)
    else:
        classifier = StainBaseline(stains=stains)
    calls = classify_nuclei(labels, image, classifier)
    _write_calls_csv(calls, labels, out)
    click.echo(f"{len(calls)} nuclei classified; written to {out}")


def _write_calls_csv(calls: list[NucleusCall], labels, out) -> None:
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "class", "confidence"])
        for call in calls:
            writer.writerow([call.label, _display_class(call.label_class), repr(call.confidence)])


def _display_class(cls: str) -> str:
    return "Positive" if cls == "positive" else "Negative"


def _read_counts_csv(path: Path) -> dict[str, list[RegionCount]]:
    cases: dict[str, list[RegionCount]] = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cases[row["case"]].append(
                RegionCount(
                    region_id=row["roi"],
                    n_positive=int(row["n_positive"]),
                    n_total=int(row["n_total"]),
                    roi_kind=row.get("roi_kind", "other") or "other",
                )
            )
    return dict(cases)


@cli.command("score")
@click.option("--counts", "counts_path", type=click.Path(path_type=Path),
              help="CSV with case,roi,n_positive,n_total[,roi_kind] rows.")
@click.option("--nuclei", "nuclei_paths", type=click.Path(path_type=Path), multiple=True,
              help="Per-ROI nucleus CSVs from the classify command (one case).")
@click.option("--case", "case_name", default="case", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--manual", "manual_path", type=click.Path(path_type=Path),
              help="CSV with case,manual_pi for agreement statistics.")
@click.option("--agreement-out", type=click.Path(path_type=Path),
              help="Where to write agreement stats (default: <out stem>_agreement.csv).")
def cmd_score(counts_path, nuclei_paths, case_name, out, manual_path, agreement_out):
    """Aggregate per-ROI counts into PI scores, optionally with agreement."""
    if (counts_path is None) == (not nuclei_paths):
        raise click.UsageError("pass exactly one of --counts or --nuclei")
    if counts_path is not None:
        if not Path(counts_path).is_file():
            raise MissingInputError(f"input not found: {counts_path}")
        cases = _read_counts_csv(Path(counts_path))
    else:
        rois = []
        for i, path in enumerate(nuclei_paths):
            if not Path(path).is_file():
                raise MissingInputError(f"input not found: {path}")
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            total = len(rows)
            if total == 0:
                log.warning("ROI %s has no nuclei; excluded", path)
                continue
            positive = sum(1 for r in rows if r["class"].lower() == "positive")
            rois.append(RegionCount(region_id=Path(path).stem, n_positive=positive, n_total=total))
        if not rois:
            raise ScoringError("no usable ROI; cannot compute PI")
        cases = {case_name: rois}

    auto_pi: dict[str, float] = {}
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "roi", "n_positive", "n_total", "pi_roi", "pi_case"])
        for case in sorted(cases):
            report = pi_score(cases[case])
            auto_pi[case] = report.pi
            for rc, per in zip(cases[case], report.per_region):
                writer.writerow([case, rc.region_id, rc.n_positive, rc.n_total, repr(per), repr(report.pi)])
    click.echo(f"PI scores for {len(cases)} case(s) written to {out}")

    if manual_path is not None:
        if not Path(manual_path).is_file():
            raise MissingInputError(f"input not found: {manual_path}")
        with open(manual_path, newline="") as fh:
            manual = {r["case"]: float(r["manual_pi"]) for r in csv.DictReader(fh)}
        shared = sorted(set(manual) & set(auto_pi))
        if len(shared) < 3:
            raise ScoringError(f"agreement needs >= 3 shared cases, found {len(shared)}")
        pairs = [(manual[c], auto_pi[c]) for c in shared]
        stats = agreement(pairs)
        agree_path = Path(agreement_out) if agreement_out else Path(out).with_name(Path(out).stem + "_agreement.csv")
        with open(agree_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pearson", "spearman", "r2", "bland_mean_diff", "loa_lower", "loa_upper"])
            writer.writerow([
                "NA" if stats.pearson is None else repr(stats.pearson),
                "NA" if stats.spearman is None else repr(stats.spearman),
                "NA" if stats.r2 is None else repr(stats.r2),
                repr(stats.bland_mean_diff),
                repr(stats.bland_loa[0]),
                repr(stats.bland_loa[1]),
            ])
        bland_path = agree_path.with_name(agree_path.stem + "_bland_altman.csv")
        with open(bland_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case", "mean_xy", "diff"])
            for c in shared:
                m, a = manual[c], auto_pi[c]
                writer.writerow([c, repr((m + a) / 2.0), repr(m - a)])
        click.echo(f"agreement statistics written to {agree_path}")


@cli.command("pipeline")
@click.option("--config", "config_path", type=click.Path(path_type=Path))
@click.option("--image", "image_path", type=click.Path(path_type=Path))
@click.option("--prob", "prob_path", type=click.Path(path_type=Path))
@click.option("--image-dir", type=click.Path(path_type=Path))
@click.option("--prob-dir", type=click.Path(path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--overlap-model", type=click.Path(path_type=Path),
              help="Override the overlap detector model path.")
@click.option("--classifier-model", type=click.Path(path_type=Path),
              help="Random-forest model path (switches the classifier to rf).")
@click.option("--splitter", type=click.Choice(["proposed", "dtw", "gmm"]))
@click.option("--threads", type=int)
def cmd_pipeline(config_path, image_path, prob_path, image_dir, prob_dir, out,
                 overlap_model, classifier_model, splitter, threads):
    """Run the full pass: mask cleanup, separation, classification, PI."""
    single = image_path is not None and prob_path is not None
    batch = image_dir is not None and prob_dir is not None
    if single == batch:
        raise click.UsageError("pass either --image/--prob or --image-dir/--prob-dir")
    overrides: dict = {}
    if overlap_model:
        overrides["overlap_model"] = str(overlap_model)
    if classifier_model:
        overrides["classifier"] = {"kind": "rf", "model": str(classifier_model)}
    if splitter:
        overrides["separation"] = {"splitter": splitter}
    if threads:
        overrides["threads"] = threads
    cfg = load_config(config_path, overrides)
    models = load_models(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    if single:
        jobs = [(Path(image_path).stem, Path(image_path), Path(prob_path))]
        inputs = {"image": str(image_path), "prob": str(prob_path)}
    else:
        jobs = matched_stems(Path(image_dir), Path(prob_dir))
        inputs = {"image_dir": str(image_dir), "prob_dir": str(prob_dir)}

    results, failures = run_batch(cfg, models, jobs, out)
    summary = out / "pipeline_summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "n_nuclei", "n_positive", "pi", "status"])
        done = {r["image"]: r for r in results}
        failed = {f.split(":", 1)[0]: f for f in failures}
        for stem in sorted(set(done) | set(failed)):
            if stem in done:
                r = done[stem]
                pi_txt = "NA" if r["pi"] is None else repr(r["pi"])
                writer.writerow([stem, r["n_nuclei"], r["n_positive"], pi_txt, "ok"])
            else:
                writer.writerow([stem, "", "", "", failed[stem]])
    outputs = [summary.name] + [name for r in results for name in r["outputs"]]
    write_run_manifest(out, "pipeline", inputs, cfg.resolved, outputs)
    for failure in failures:
        click.echo(f"FAILED {failure}", err=True)
    click.echo(f"{len(results)} image(s) processed; summary at {summary}")
    if failures:
        raise PipelineError(f"{len(failures)} image(s) failed")


@cli.command("eval")
@click.option("--pred-dir", type=click.Path(path_type=Path), required=True)
@click.option("--gt-dir", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def cmd_eval(pred_dir, gt_dir, out):
    """Segmentation metrics for same-named label maps in two directories."""
    for d in (pred_dir, gt_dir):
        if not Path(d).is_dir():
            raise MissingInputError(f"directory not found: {d}")
    rows = evaluate_directories(Path(pred_dir), Path(gt_dir))
    write_metric_csv(rows, Path(out))
    mean = rows[-1]
    click.echo(
        f"{len(rows) - 1} image(s): mean dice2 {mean['dice2']:.4f}, aji {mean['aji']:.4f}, "
        f"pq {mean['pq']:.4f}; written to {out}"
    )


@cli.command("import-qupath")
@click.option("--geojson", "geojson_path", type=click.Path(path_type=Path), required=True)
@click.option("--out-labels", type=click.Path(path_type=Path), required=True)
@click.option("--out-classes", type=click.Path(path_type=Path), required=True)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
def cmd_import_qupath(geojson_path, out_labels, out_classes, width, height):
    """Rasterize QuPath polygon annotations to a label map plus classes."""
    if not Path(geojson_path).is_file():
        raise MissingInputError(f"input not found: {geojson_path}")
    _, labels, classes = import_qupath_geojson(geojson_path, width=width, height=height)
    save_label_map(labels, out_labels)
    with open(out_classes, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "class"])
        for k, cls in enumerate(classes, start=1):
            writer.writerow([k, cls])
    click.echo(f"{labels.n_instances} annotation(s) rasterized to {out_labels}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 4
    except (MissingInputError, FileNotFoundError, AnnotationError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except RasterError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except ModelFormatError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except (PipelineError, SynthesisError, ScoringError, StainError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())
