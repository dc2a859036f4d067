"""End-to-end pipelines wiring data, preprocessing, model, training and
evaluation together; every CLI subcommand maps to one function here.

Artifacts directory layout (one per run):
  run_<command>.json          resolved config + seed (reproducibility record)
  <REGION>/encoder.wgt        pretrained autoencoder (best checkpoint)
  <REGION>/norm.json          input/target min-max stats from pretraining
  <REGION>/pretrain_report.json
  <REGION>/classifier.wgt     trained head (train subcommand)
  metrics.csv, roc_<REGION>.csv, pr_<REGION>.csv, loso_mce.csv,
  trial_curve.csv, comparison.csv, scores.csv, results.json
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .config import RunConfig
from .data import (
    DatasetManifest,
    Montage,
    TrialRecording,
    apply_exclusions,
    load_manifest,
    load_montage,
    read_trial_csv,
    intensity_column_names,
    chromophore_column_names,
    write_trial_csv,
)
from .model import (
    ModelConfig,
    build_classifier,
    build_model,
    head_probs,
    load_classifier,
    load_model,
    save_classifier,
    save_model,
)
from .preprocess import (
    NormalizationStats,
    apply_norm,
    fit_norm,
    preprocess_full,
    preprocess_raw,
)
from .synth import generate_dataset
from .train import TrainConfig, compute_contexts, pretrain, train_head

__all__ = [
    "DatasetBundle",
    "load_dataset",
    "region_seed",
    "run_synth",
    "run_preprocess",
    "run_pretrain",
    "run_train",
    "run_infer",
    "run_cv",
    "run_loso",
    "run_trial_curve",
    "run_compare",
    "run_report",
]


@dataclass
class DatasetBundle:
    manifest: DatasetManifest
    montage: Montage
    trials: list[TrialRecording]
    labels: np.ndarray
    subjects: np.ndarray
    days: np.ndarray
    trial_indices: np.ndarray


def load_dataset(manifest_path: str | Path, cfg: RunConfig) -> DatasetBundle:
    manifest = load_manifest(manifest_path)
    montage = load_montage(manifest.resolve(manifest.montage_path))
    kept, _dropped = apply_exclusions(
        manifest,
        downsample_factor=cfg.preprocess.downsample_factor,
        duration_tolerance=cfg.data.duration_tolerance,
        sample_rate_hz=montage.sample_rate_hz,
    )
    expected = intensity_column_names([c.id for c in montage.long_channels])
    trials, labels, subjects, days, tidx = [], [], [], [], []
    for rec in kept.records:
        raw, _cols = read_trial_csv(kept.resolve(rec.path), expected_columns=expected)
        trials.append(
            TrialRecording(
                subject_id=rec.subject,
                task=rec.task,
                day=rec.day,
                trial_index=rec.trial,
                label=rec.label,
                channels=tuple(c.id for c in montage.long_channels),
                raw=raw,
            )
        )
        labels.append(rec.label)
        subjects.append(rec.subject)
        days.append(rec.day)
        tidx.append(rec.trial)
    return DatasetBundle(
        manifest=kept,
        montage=montage,
        trials=trials,
        labels=np.array(labels, dtype=np.int64),
        subjects=np.array(subjects),
        days=np.array(days, dtype=np.int64),
        trial_indices=np.array(tidx, dtype=np.int64),
    )


def region_seed(master_seed: int, region: str) -> int:
    ss = np.random.SeedSequence((master_seed, 31, int.from_bytes(region.encode(), "little")))
    return int(ss.generate_state(1, np.uint64)[0])


def _regions_of(bundle: DatasetBundle, region: str | None, all_regions: bool) -> list[str]:
    if all_regions:
        return list(bundle.montage.regions())
    if region is None:
        raise ValueError("pass --region NAME (comma-separable) or --all-regions")
    return [r.strip() for r in region.split(",") if r.strip()]


def _prepare_arrays(bundle: DatasetBundle, cfg: RunConfig, region: str, mode: str):
    """(model inputs, pretraining targets), unnormalized."""
    pc = cfg.preprocess
    full = [preprocess_full(t, pc, bundle.montage, region) for t in bundle.trials]
    if mode == "baseline":
        raw = [x.copy() for x in full]
    else:
        raw = [preprocess_raw(t, pc, bundle.montage, region) for t in bundle.trials]
    return raw, full


def _norm_path(artifacts: Path, region: str) -> Path:
    return artifacts / region / "norm.json"


def _save_norm(path: Path, in_stats: NormalizationStats, tg_stats: NormalizationStats):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps({"input": in_stats.to_dict(), "target": tg_stats.to_dict()}, indent=1)
    )


def _load_norm(path: Path) -> tuple[NormalizationStats, NormalizationStats]:
    doc = json.loads(path.read_text())
    return (
        NormalizationStats.from_dict(doc["input"]),
        NormalizationStats.from_dict(doc["target"]),
    )


# --------------------------------------------------------------------------
# subcommand pipelines
# --------------------------------------------------------------------------

def run_synth(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    manifest = generate_dataset(cfg.scenario, out, preprocess_cfg=cfg.preprocess)
    cfg.write_manifest(out / "run_synth.json", "synth",
                       extra={"n_trials": len(manifest.records)})
    return out / "manifest.json"


def run_preprocess(
    cfg: RunConfig,
    manifest_path: str | Path,
    out_dir: str | Path,
    region: str | None,
    all_regions: bool = False,
) -> Path:
    """Write fully processed chromophore CSVs (umol/L) per kept trial."""
    bundle = load_dataset(manifest_path, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    regions = _regions_of(bundle, region, all_regions) if (region or all_regions) else [None]
    fs = bundle.montage.sample_rate_hz / cfg.preprocess.downsample_factor
    for reg in regions:
        sub = out if reg is None else out / reg
        sub.mkdir(parents=True, exist_ok=True)
        chans = (
            bundle.montage.long_channels if reg is None
            else bundle.montage.region_channels(reg)
        )
        cols = chromophore_column_names([c.id for c in chans])
        for trial in bundle.trials:
            conc = preprocess_full(trial, cfg.preprocess, bundle.montage, reg)
            t_s = np.arange(conc.shape[0]) / fs
            stem = f"{trial.subject_id}_d{trial.day:02d}_t{trial.trial_index:02d}"
            write_trial_csv(sub / f"{stem}_processed.csv", t_s, conc, cols)
    cfg.write_manifest(out / "run_preprocess.json", "preprocess")
    return out


def _pretrain_region(args) -> tuple[str, float, float]:
    cfg, manifest_path, out_dir, region, mode = args
    bundle = load_dataset(manifest_path, cfg)
    raw, full = _prepare_arrays(bundle, cfg, region, mode)
    in_stats, tg_stats = fit_norm(raw), fit_norm(full)
    inputs = [apply_norm(x, in_stats) for x in raw]
    targets = [apply_norm(x, tg_stats) for x in full]
    n_ch = len(bundle.montage.region_channels(region))
    mcfg = cfg.model_config(n_ch, mode)
    seed = region_seed(cfg.seed, region)
    model = build_model(mcfg, rng=seed)
    best, report = pretrain(model, inputs, targets, cfg.train, seed=seed)
    rdir = Path(out_dir) / region
    rdir.mkdir(parents=True, exist_ok=True)
    save_model(best, rdir / "encoder.wgt")
    _save_norm(_norm_path(Path(out_dir), region), in_stats, tg_stats)
    (rdir / "pretrain_report.json").write_text(report.to_json() + "\n")
    return region, report.epoch_losses[0], report.best_loss


def run_pretrain(
    cfg: RunConfig,
    manifest_path: str | Path,
    out_dir: str | Path,
    region: str | None,
    all_regions: bool = False,
    mode: str | None = None,
) -> list[tuple[str, float, float]]:
    bundle = load_dataset(manifest_path, cfg)
    regions = _regions_of(bundle, region, all_regions)
    mode = mode or cfg.model.mode
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, str(manifest_path), str(out), reg, mode) for reg in regions]
    results = _map_jobs(_pretrain_region, jobs, cfg.eval.workers)
    cfg.write_manifest(out / "run_pretrain.json", "pretrain",
                       extra={"regions": regions, "mode": mode})
    return results


def _map_jobs(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def _load_region_model(cfg: RunConfig, artifacts: Path, region: str, n_ch: int, mode: str):
    mcfg = cfg.model_config(n_ch, mode)
    encoder = load_model(artifacts / region / "encoder.wgt", mcfg)
    in_stats, tg_stats = _load_norm(_norm_path(artifacts, region))
    return mcfg, encoder, in_stats, tg_stats


def _region_contexts(
    cfg: RunConfig, bundle: DatasetBundle, artifacts: Path, region: str, mode: str
):
    n_ch = len(bundle.montage.region_channels(region))
    mcfg, encoder, in_stats, _ = _load_region_model(cfg, artifacts, region, n_ch, mode)
    raw, _full = _prepare_arrays(bundle, cfg, region, mode)
    inputs = [apply_norm(x, in_stats) for x in raw]
    return mcfg, encoder, compute_contexts(encoder, inputs)


def run_train(
    cfg: RunConfig,
    manifest_path: str | Path,
    artifacts_dir: str | Path,
    region: str | None,
    all_regions: bool = False,
    mode: str | None = None,
) -> dict[str, dict[str, float]]:
    """Train the classifier head on a stratified split, report on the
    held-out fraction, and save the classifier weights."""
    bundle = load_dataset(manifest_path, cfg)
    regions = _regions_of(bundle, region, all_regions)
    mode = mode or cfg.model.mode
    artifacts = Path(artifacts_dir)
    folds_by_region: dict[str, list[ev.FoldResult]] = {}
    out_metrics: dict[str, dict[str, float]] = {}
    for reg in regions:
        seed = region_seed(cfg.seed, reg)
        mcfg, encoder, ctx = _region_contexts(cfg, bundle, artifacts, reg, mode)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 41))))
        train_idx, test_idx = ev.stratified_holdout(
            bundle.labels, cfg.eval.holdout_fraction, rng
        )
        clf = build_classifier(mcfg, encoder, rng=seed + 1)
        clf, _rep = train_head(clf, ctx[train_idx], bundle.labels[train_idx], cfg.train, seed)
        save_classifier(clf, artifacts / reg / "classifier.wgt")
        scores = head_probs(clf, ctx[test_idx]).data[:, 1]
        cm = ev.confusion(scores, bundle.labels[test_idx], cfg.eval.threshold)
        vals = ev.metrics(cm)
        vals["roc_auc"] = ev.roc_curve(scores, bundle.labels[test_idx]).auc
        vals["pr_auc"] = ev.pr_curve(scores, bundle.labels[test_idx]).auc
        folds_by_region[reg] = [
            ev.FoldResult(0, cm, vals, scores, bundle.labels[test_idx].copy())
        ]
        out_metrics[reg] = vals
        ev.write_curve_csv(artifacts / f"roc_{reg}.csv",
                           ev.roc_curve(scores, bundle.labels[test_idx]), "fpr", "tpr")
        ev.write_curve_csv(artifacts / f"pr_{reg}.csv",
                           ev.pr_curve(scores, bundle.labels[test_idx]), "recall", "precision")
    ev.write_metrics_csv(artifacts / "metrics.csv", folds_by_region)
    cfg.write_manifest(
        artifacts / "run_train.json", "train",
        extra={"regions": regions, "mode": mode,
               "holdout_fraction": cfg.eval.holdout_fraction},
    )
    return out_metrics


def run_infer(
    cfg: RunConfig,
    manifest_path: str | Path,
    artifacts_dir: str | Path,
    region: str,
    out_file: str | Path | None = None,
    mode: str | None = None,
) -> Path:
    bundle = load_dataset(manifest_path, cfg)
    mode = mode or cfg.model.mode
    artifacts = Path(artifacts_dir)
    n_ch = len(bundle.montage.region_channels(region))
    mcfg, encoder, in_stats, _ = _load_region_model(cfg, artifacts, region, n_ch, mode)
    clf = load_classifier(artifacts / region / "classifier.wgt", mcfg, encoder)
    raw, _ = _prepare_arrays(bundle, cfg, region, mode)
    ctx = compute_contexts(encoder, [apply_norm(x, in_stats) for x in raw])
    scores = head_probs(clf, ctx).data[:, 1]
    pred = (scores >= cfg.eval.threshold).astype(int)
    out = Path(out_file) if out_file else artifacts / "scores.csv"
    lines = ["subject,day,trial,label,score,predicted"]
    for t, s, p in zip(bundle.trials, scores, pred):
        lines.append(
            f"{t.subject_id},{t.day},{t.trial_index},{t.label},{s:.10g},{p}"
        )
    out.write_text("\n".join(lines) + "\n")
    return out


def _head_train_fn(mcfg: ModelConfig, encoder, ctx: np.ndarray, labels: np.ndarray,
                   train_cfg: TrainConfig):
    def train_fn(train_idx, seed):
        clf = build_classifier(mcfg, encoder, rng=seed)
        clf, _ = train_head(clf, ctx[train_idx], labels[train_idx], train_cfg, seed)
        return clf

    def score_fn(clf, idx):
        return head_probs(clf, ctx[idx]).data[:, 1]

    return train_fn, score_fn


def _save_results_json(path: Path, doc: dict) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer, np.floating)):
            return o.item()
        raise TypeError(type(o).__name__)

    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=default) + "\n")


def run_cv(
    cfg: RunConfig,
    manifest_path: str | Path,
    artifacts_dir: str | Path,
    region: str | None,
    all_regions: bool = False,
    mode: str | None = None,
    k: int | None = None,
    retention_manifest: str | Path | None = None,
) -> dict[str, dict[str, tuple[float, float]]]:
    """k-fold CV of the classifier head per region on frozen contexts."""
    bundle = load_dataset(manifest_path, cfg)
    regions = _regions_of(bundle, region, all_regions)
    mode = mode or cfg.model.mode
    k = k or cfg.eval.k
    artifacts = Path(artifacts_dir)
    retention = load_dataset(retention_manifest, cfg) if retention_manifest else None
    folds_by_region = {}
    results_doc: dict = {"command": "cv", "k": k, "threshold": cfg.eval.threshold, "regions": {}}
    for reg in regions:
        seed = region_seed(cfg.seed, reg)
        mcfg, encoder, ctx = _region_contexts(cfg, bundle, artifacts, reg, mode)
        retention_fn = None
        if retention is not None:
            n_ch = len(bundle.montage.region_channels(reg))
            _, _, in_stats, _ = _load_region_model(cfg, artifacts, reg, n_ch, mode)
            r_raw, _ = _prepare_arrays(retention, cfg, reg, mode)
            r_ctx = compute_contexts(encoder, [apply_norm(x, in_stats) for x in r_raw])

            def retention_fn(clf, _ctx=r_ctx, _labels=retention.labels):
                return head_probs(clf, _ctx).data[:, 1], _labels

        train_fn, score_fn = _head_train_fn(mcfg, encoder, ctx, bundle.labels, cfg.train)
        folds = ev.kfold_cv(
            bundle.labels, k, train_fn, score_fn, seed,
            stratified=cfg.eval.stratified, threshold=cfg.eval.threshold,
            retention_fn=retention_fn,
        )
        folds_by_region[reg] = folds
        pooled_scores = np.concatenate([f.scores for f in folds])
        pooled_labels = np.concatenate([f.labels for f in folds])
        ev.write_curve_csv(artifacts / f"roc_{reg}.csv",
                           ev.roc_curve(pooled_scores, pooled_labels), "fpr", "tpr")
        ev.write_curve_csv(artifacts / f"pr_{reg}.csv",
                           ev.pr_curve(pooled_scores, pooled_labels), "recall", "precision")
        results_doc["regions"][reg] = [
            {
                "fold": f.fold_id,
                "scores": f.scores,
                "labels": f.labels,
                "retention": f.retention,
            }
            for f in folds
        ]
    ev.write_metrics_csv(artifacts / "metrics.csv", folds_by_region)
    _save_results_json(artifacts / "results.json", results_doc)
    cfg.write_manifest(artifacts / "run_cv.json", "cv",
                       extra={"regions": regions, "mode": mode, "k": k})
    return {reg: ev.summarize_folds(f) for reg, f in folds_by_region.items()}


def run_loso(
    cfg: RunConfig,
    manifest_path: str | Path,
    artifacts_dir: str | Path,
    region: str | None,
    all_regions: bool = False,
    mode: str | None = None,
) -> dict[str, dict[str, float]]:
    bundle = load_dataset(manifest_path, cfg)
    regions = _regions_of(bundle, region, all_regions)
    mode = mode or cfg.model.mode
    artifacts = Path(artifacts_dir)
    by_region = {}
    summaries = {}
    for reg in regions:
        seed = region_seed(cfg.seed, reg)
        mcfg, encoder, ctx = _region_contexts(cfg, bundle, artifacts, reg, mode)
        train_fn, score_fn = _head_train_fn(mcfg, encoder, ctx, bundle.labels, cfg.train)
        scores, summary = ev.loso_cv(
            bundle.labels, bundle.subjects, train_fn, score_fn, seed,
            threshold=cfg.eval.threshold,
        )
        by_region[reg] = (scores, summary)
        summaries[reg] = summary
    ev.write_loso_csv(artifacts / "loso_mce.csv", by_region)
    cfg.write_manifest(artifacts / "run_loso.json", "loso",
                       extra={"regions": regions, "mode": mode})
    return summaries


def run_trial_curve(
    cfg: RunConfig,
    manifest_path: str | Path,
    artifacts_dir: str | Path,
    region: str | None,
    all_regions: bool = False,
    mode: str | None = None,
    from_day: int | None = None,
) -> ev.TrialCurveResult:
    bundle = load_dataset(manifest_path, cfg)
    regions = _regions_of(bundle, region, all_regions)
    mode = mode or cfg.model.mode
    artifacts = Path(artifacts_dir)
    from_day = cfg.eval.from_day if from_day is None else from_day

    ctx_by_region = {}
    mcfg_by_region = {}
    encoder_by_region = {}
    for reg in regions:
        mcfg, encoder, ctx = _region_contexts(cfg, bundle, artifacts, reg, mode)
        ctx_by_region[reg] = ctx
        mcfg_by_region[reg] = mcfg
        encoder_by_region[reg] = encoder

    def train_fn(reg, train_idx, seed):
        clf = build_classifier(mcfg_by_region[reg], encoder_by_region[reg], rng=seed)
        clf, _ = train_head(
            clf, ctx_by_region[reg][train_idx], bundle.labels[train_idx], cfg.train, seed
        )
        return clf

    def score_fn(reg, clf, idx):
        return head_probs(clf, ctx_by_region[reg][idx]).data[:, 1]

    result = ev.trial_index_analysis(
        bundle.labels, bundle.days, bundle.trial_indices, regions,
        train_fn, score_fn, cfg.seed,
        from_day=from_day, cv_folds=cfg.eval.trial_cv_folds,
        threshold=cfg.eval.threshold,
    )
    ev.write_trial_curve_csv(artifacts / "trial_curve.csv", result)
    cfg.write_manifest(artifacts / "run_trial_curve.json", "trial-curve",
                       extra={"regions": regions, "from_day": from_day})
    return result


def run_compare(
    results_a: str | Path,
    results_b: str | Path,
    out_file: str | Path,
    task: str = "synthetic",
) -> dict[str, dict[str, float]]:
    """One-sided Wilcoxon per metric: does run B improve over run A?
    Pairs per-region fold-mean metric values from the two metrics.csv files."""
    table_a = ev.read_metric_means(Path(results_a) / "metrics.csv")
    table_b = ev.read_metric_means(Path(results_b) / "metrics.csv")
    rows = {task: ev.compare_metric_tables(table_a, table_b)}
    ev.write_comparison_csv(out_file, rows)
    return rows[task]


def run_report(results_dir: str | Path) -> list[Path]:
    """Re-render metrics.csv and curve files from the stored results.json."""
    results_dir = Path(results_dir)
    doc = json.loads((results_dir / "results.json").read_text())
    threshold = doc.get("threshold", 0.5)
    folds_by_region = {}
    written = []
    for reg, folds in doc["regions"].items():
        out = []
        for f in folds:
            scores = np.asarray(f["scores"], dtype=np.float64)
            labels = np.asarray(f["labels"], dtype=np.int64)
            cm = ev.confusion(scores, labels, threshold)
            vals = ev.metrics(cm)
            vals["roc_auc"] = ev.roc_curve(scores, labels).auc
            vals["pr_auc"] = ev.pr_curve(scores, labels).auc
            out.append(ev.FoldResult(f["fold"], cm, vals, scores, labels, f.get("retention")))
        folds_by_region[reg] = out
        pooled_scores = np.concatenate([f.scores for f in out])
        pooled_labels = np.concatenate([f.labels for f in out])
        roc_path = results_dir / f"roc_{reg}.csv"
        pr_path = results_dir / f"pr_{reg}.csv"
        ev.write_curve_csv(roc_path, ev.roc_curve(pooled_scores, pooled_labels), "fpr", "tpr")
        ev.write_curve_csv(pr_path, ev.pr_curve(pooled_scores, pooled_labels), "recall", "precision")
        written += [roc_path, pr_path]
    metrics_path = results_dir / "metrics.csv"
    ev.write_metrics_csv(metrics_path, folds_by_region)
    written.append(metrics_path)
    return written
