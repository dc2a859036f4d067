"""Confusion-matrix metrics, ROC/PR curves, stratified k-fold and LOSO
cross-validation, trial-index analysis, the exact one-sided Wilcoxon
signed-rank test, and plot-ready result files.

Conventions: scores are p(unsuccessful); the positive class (label 1) is
the unsuccessful trial; a score exactly at threshold counts positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "ConfusionMatrix",
    "CurveResult",
    "FoldResult",
    "SubjectScore",
    "TrialCurveResult",
    "METRIC_KEYS",
    "confusion",
    "metrics",
    "roc_curve",
    "pr_curve",
    "stratified_folds",
    "plain_folds",
    "stratified_holdout",
    "kfold_cv",
    "loso_cv",
    "trial_index_analysis",
    "wilcoxon_one_sided",
    "fold_seed",
    "summarize_folds",
    "compare_metric_tables",
    "write_metrics_csv",
    "write_curve_csv",
    "write_loso_csv",
    "write_trial_curve_csv",
    "write_comparison_csv",
    "read_metric_means",
]

METRIC_KEYS = (
    "mcc",
    "f1_score",
    "sensitivity",
    "specificity",
    "accuracy",
    "balanced_accuracy",
)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = scores >= threshold  # boundary rule: exactly 0.5 -> positive
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """MCC/F1/sensitivity/specificity/accuracy/balanced accuracy.

    Any zero denominator yields 0 by convention (MCC included).
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp, fp, tn, fn = (float(cm.tp), float(cm.fp), float(cm.tn), float(cm.fn))

    def ratio(num, den):
        return num / den if den > 0 else 0.0

    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    sens = ratio(tp, tp + fn)
    spec = ratio(tn, tn + fp)
    return {
        "mcc": (tp * tn - fp * fn) / math.sqrt(mcc_den) if mcc_den > 0 else 0.0,
        "f1_score": ratio(2 * tp, 2 * tp + fp + fn),
        "sensitivity": sens,
        "specificity": spec,
        "accuracy": (tp + tn) / cm.total,
        "balanced_accuracy": (sens + spec) / 2.0,
    }


@dataclass(frozen=True)
class CurveResult:
    xs: np.ndarray
    ys: np.ndarray
    auc: float


def _check_two_classes(labels: np.ndarray) -> None:
    if np.unique(labels).size < 2:
        raise ValueError("curve computation needs both classes present")


def roc_curve(scores, labels) -> CurveResult:
    """Threshold sweep over distinct scores (ties grouped); trapezoid AUC."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_two_classes(labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    # cumulative counts at the end of each tie group
    boundary = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    cuts = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y == 1)[cuts]
    fp = np.cumsum(y == 0)[cuts]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return CurveResult(xs=fpr, ys=tpr, auc=auc)


def pr_curve(scores, labels) -> CurveResult:
    """Recall sweep; AUC by step integration (precision right-constant),
    which equals the standard average-precision estimator."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_two_classes(labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    n_pos = int((labels == 1).sum())
    boundary = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    cuts = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y == 1)[cuts].astype(float)
    k = (cuts + 1).astype(float)  # predictions made at each threshold
    recall = tp / n_pos
    precision = tp / k
    rec = np.concatenate([[0.0], recall])
    auc = float(np.sum(np.diff(rec) * precision))
    return CurveResult(xs=recall, ys=precision, auc=auc)


# --------------------------------------------------------------------------
# cross-validation partitions
# --------------------------------------------------------------------------

def stratified_folds(labels, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """k folds, sizes within 1 overall and within 1 per class.

    Items of each class are shuffled and dealt round-robin, continuing the
    fold cursor across classes so total sizes stay balanced.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if k < 2 or k > n:
        raise ValueError(f"k={k} incompatible with {n} trials")
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        for i in idx:
            folds[cursor % k].append(int(i))
            cursor += 1
    out = [np.sort(np.array(f, dtype=np.int64)) for f in folds]
    for f in out:
        if np.unique(labels[f]).size < 2:
            raise ValueError(
                "a stratified fold ended up single-class; reduce k or check labels"
            )
    return out


def plain_folds(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    if k < 2 or k > n:
        raise ValueError(f"k={k} incompatible with {n} trials")
    perm = rng.permutation(n)
    return [np.sort(perm[i::k]) for i in range(k)]


def stratified_holdout(
    labels, fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, test_idx) with ~fraction of every class held out
    (at least one item per class), preserving the imbalance."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must be in (0, 1)")
    test: list[int] = []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_test = max(1, round(fraction * idx.size))
        if n_test >= idx.size:
            raise ValueError(f"class {cls} too small for a {fraction:.0%} holdout")
        test.extend(idx[:n_test].tolist())
    test_idx = np.sort(np.array(test, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(labels.size), test_idx)
    return train_idx, test_idx


def fold_seed(master_seed: int, fold_id: int) -> int:
    ss = np.random.SeedSequence((master_seed, 21, fold_id))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class FoldResult:
    fold_id: int
    cm: ConfusionMatrix
    metric_values: dict[str, float]   # METRIC_KEYS + roc_auc + pr_auc
    scores: np.ndarray
    labels: np.ndarray
    retention: dict[str, float] | None = None


def _evaluate_split(scores, labels, threshold) -> tuple[ConfusionMatrix, dict[str, float]]:
    cm = confusion(scores, labels, threshold)
    vals = metrics(cm)
    vals["roc_auc"] = roc_curve(scores, labels).auc
    vals["pr_auc"] = pr_curve(scores, labels).auc
    return cm, vals


def kfold_cv(
    labels,
    k: int,
    train_fn,
    score_fn,
    master_seed: int,
    stratified: bool = True,
    threshold: float = 0.5,
    retention_fn=None,
) -> list[FoldResult]:
    """Stratified (default) k-fold CV.

    train_fn(train_idx, seed) -> model_blob; score_fn(blob, idx) -> scores.
    retention_fn(blob) -> (scores, labels) optionally scores a held-out
    retention set with each fold's model.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((master_seed, 20))))
    folds = (
        stratified_folds(labels, k, rng) if stratified else plain_folds(labels.size, k, rng)
    )
    results = []
    all_idx = np.arange(labels.size)
    for fold_id, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(all_idx, val_idx)
        blob = train_fn(train_idx, fold_seed(master_seed, fold_id))
        scores = np.asarray(score_fn(blob, val_idx), dtype=np.float64)
        cm, vals = _evaluate_split(scores, labels[val_idx], threshold)
        retention = None
        if retention_fn is not None:
            r_scores, r_labels = retention_fn(blob)
            _, retention = _evaluate_split(
                np.asarray(r_scores, float), np.asarray(r_labels, np.int64), threshold
            )
        results.append(
            FoldResult(fold_id, cm, vals, scores, labels[val_idx].copy(), retention)
        )
    return results


@dataclass
class SubjectScore:
    subject: str
    n_trials: int
    mce: float


def loso_cv(
    labels,
    subjects,
    train_fn,
    score_fn,
    master_seed: int,
    threshold: float = 0.5,
) -> tuple[list[SubjectScore], dict[str, float]]:
    """Leave-one-subject-out CV: MCE per held-out subject plus aggregates.

    A held-out subject may be single-class; the MCE stays well-defined.
    """
    labels = np.asarray(labels, dtype=np.int64)
    subjects = np.asarray(subjects)
    uniq = sorted(set(subjects.tolist()))
    results = []
    pooled_scores: list[np.ndarray] = []
    pooled_labels: list[np.ndarray] = []
    for i, subj in enumerate(uniq):
        held = np.flatnonzero(subjects == subj)
        train_idx = np.flatnonzero(subjects != subj)
        blob = train_fn(train_idx, fold_seed(master_seed, i))
        scores = np.asarray(score_fn(blob, held), dtype=np.float64)
        pred = (scores >= threshold).astype(np.int64)
        mce = float(np.mean(pred != labels[held]))
        results.append(SubjectScore(subject=str(subj), n_trials=held.size, mce=mce))
        pooled_scores.append(scores)
        pooled_labels.append(labels[held])
    mces = np.array([r.mce for r in results])
    summary = {"mean_mce": float(mces.mean()), "sd_mce": float(mces.std(ddof=1)) if len(mces) > 1 else 0.0}
    all_scores = np.concatenate(pooled_scores)
    all_labels = np.concatenate(pooled_labels)
    if np.unique(all_labels).size == 2:
        _, pooled = _evaluate_split(all_scores, all_labels, threshold)
        summary.update({f"pooled_{k}": v for k, v in pooled.items()})
    return results, summary


@dataclass
class TrialCurveResult:
    trial_indices: np.ndarray
    regions: tuple[str, ...]
    balanced_accuracy: np.ndarray  # (n_indices, n_regions)
    sums: np.ndarray               # per trial index, summed over regions
    slope: float
    intercept: float


def trial_index_analysis(
    labels,
    days,
    trial_indices,
    regions,
    train_fn,
    score_fn,
    master_seed: int,
    from_day: int = 10,
    cv_folds: int = 3,
    threshold: float = 0.5,
) -> TrialCurveResult:
    """Balanced accuracy per (trial index, region) from trials of day >=
    from_day, training on one trial index at a time; first-order trend over
    the region-summed values.

    train_fn(region, train_idx, seed) -> blob; score_fn(region, blob, idx).
    Evaluation within one trial index pools the validation predictions of a
    stratified mini k-fold.
    """
    labels = np.asarray(labels, dtype=np.int64)
    days = np.asarray(days, dtype=np.int64)
    trial_indices = np.asarray(trial_indices, dtype=np.int64)
    eligible = days >= from_day
    if not eligible.any():
        raise ValueError(f"no trials with day >= {from_day}")
    idx_values = np.unique(trial_indices[eligible])
    bal = np.zeros((idx_values.size, len(regions)))
    for row, t in enumerate(idx_values):
        members = np.flatnonzero(eligible & (trial_indices == t))
        if np.unique(labels[members]).size < 2:
            raise ValueError(f"trial index {t} has a single class")
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((master_seed, 22, int(t))))
        )
        folds = stratified_folds(labels[members], cv_folds, rng)
        for col, region in enumerate(regions):
            pooled_scores = []
            pooled_labels = []
            for fold_id, val_rel in enumerate(folds):
                val_idx = members[val_rel]
                train_idx = np.setdiff1d(members, val_idx)
                blob = train_fn(region, train_idx, fold_seed(master_seed, 1000 * int(t) + fold_id))
                pooled_scores.append(np.asarray(score_fn(region, blob, val_idx), float))
                pooled_labels.append(labels[val_idx])
            cm = confusion(np.concatenate(pooled_scores), np.concatenate(pooled_labels), threshold)
            bal[row, col] = metrics(cm)["balanced_accuracy"]
    sums = bal.sum(axis=1)
    slope, intercept = np.polyfit(idx_values.astype(float), sums, 1)
    return TrialCurveResult(
        trial_indices=idx_values,
        regions=tuple(regions),
        balanced_accuracy=bal,
        sums=sums,
        slope=float(slope),
        intercept=float(intercept),
    )


# --------------------------------------------------------------------------
# Wilcoxon signed-rank, one-sided
# --------------------------------------------------------------------------

def _exact_tail_p(double_ranks: np.ndarray, w_plus_doubled: int) -> float:
    """P(W+ >= w) under random signs, by the generating-polynomial recursion
    over the (doubled, hence integer) ranks. Equivalent to enumerating all
    2^n sign assignments."""
    total = int(double_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in double_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    tail = counts[w_plus_doubled:].sum()
    return float(tail / 2.0 ** len(double_ranks))


def wilcoxon_one_sided(pairs, exact_limit: int = 25) -> dict[str, float]:
    """One-sided Wilcoxon signed-rank test on pairs (a, b).

    Alternative: median(b) > median(a). Zero differences are dropped.
    Exact tail probability for n <= exact_limit; normal approximation with
    continuity and tie corrections above.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be an (n, 2) array-like")
    d = arr[:, 1] - arr[:, 0]
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_limit:
        doubled = np.round(2 * ranks).astype(np.int64)
        w2 = int(round(2 * w_plus))
        p = _exact_tail_p(doubled, w2)
    else:
        mu = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
        z = (w_plus - mu - 0.5) / sigma
        p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return {"statistic": w_plus, "p": p, "n": float(n)}


# --------------------------------------------------------------------------
# result files
# --------------------------------------------------------------------------

_ALL_KEYS = METRIC_KEYS + ("roc_auc", "pr_auc")


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def summarize_folds(folds: list[FoldResult]) -> dict[str, tuple[float, float]]:
    """metric -> (mean, sd) across folds."""
    out = {}
    for key in _ALL_KEYS:
        vals = np.array([f.metric_values[key] for f in folds])
        out[key] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def write_metrics_csv(path: str | Path, folds_by_region: dict[str, list[FoldResult]]) -> None:
    lines = ["region,fold,tp,fp,tn,fn," + ",".join(_ALL_KEYS)]
    for region, folds in folds_by_region.items():
        for f in folds:
            cells = [region, str(f.fold_id), str(f.cm.tp), str(f.cm.fp), str(f.cm.tn), str(f.cm.fn)]
            cells += [_fmt(f.metric_values[k]) for k in _ALL_KEYS]
            lines.append(",".join(cells))
        summary = summarize_folds(folds)
        lines.append(
            ",".join([region, "mean", "", "", "", ""] + [_fmt(summary[k][0]) for k in _ALL_KEYS])
        )
        lines.append(
            ",".join([region, "sd", "", "", "", ""] + [_fmt(summary[k][1]) for k in _ALL_KEYS])
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_curve_csv(path: str | Path, curve: CurveResult, x_name: str, y_name: str) -> None:
    lines = [f"{x_name},{y_name}", *(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(curve.xs, curve.ys))]
    lines.append(f"auc,{_fmt(curve.auc)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_loso_csv(path: str | Path, by_region: dict[str, tuple[list[SubjectScore], dict]]) -> None:
    lines = ["region,subject,n_trials,mce"]
    for region, (scores, summary) in by_region.items():
        for s in scores:
            lines.append(f"{region},{s.subject},{s.n_trials},{_fmt(s.mce)}")
        lines.append(f"{region},mean,,{_fmt(summary['mean_mce'])}")
        lines.append(f"{region},sd,,{_fmt(summary['sd_mce'])}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_trial_curve_csv(path: str | Path, result: TrialCurveResult) -> None:
    header = "trial_index," + ",".join(result.regions) + ",sum"
    lines = [header]
    for i, t in enumerate(result.trial_indices):
        row = [str(int(t))] + [_fmt(v) for v in result.balanced_accuracy[i]]
        row.append(_fmt(result.sums[i]))
        lines.append(",".join(row))
    lines.append(f"trend_slope,{_fmt(result.slope)}")
    lines.append(f"trend_intercept,{_fmt(result.intercept)}")
    Path(path).write_text("\n".join(lines) + "\n")


def compare_metric_tables(
    table_a: dict[str, dict[str, float]],
    table_b: dict[str, dict[str, float]],
    keys: tuple[str, ...] = _ALL_KEYS,
) -> dict[str, dict[str, float]]:
    """Per metric, pair per-region values of run A and run B and test the
    one-sided alternative that B improves over A (median difference > 0)."""
    regions = sorted(set(table_a) & set(table_b))
    if not regions:
        raise ValueError("no common regions between the two runs")
    out = {}
    for key in keys:
        pairs = [(table_a[r][key], table_b[r][key]) for r in regions]
        try:
            out[key] = wilcoxon_one_sided(pairs)
        except ValueError:
            out[key] = {"statistic": float("nan"), "p": float("nan"), "n": 0.0}
    return out


def write_comparison_csv(
    path: str | Path, rows: dict[str, dict[str, dict[str, float]]],
    keys: tuple[str, ...] = _ALL_KEYS,
) -> None:
    """rows: task -> metric -> wilcoxon result. Table-9-style layout."""
    lines = ["task," + ",".join(keys)]
    for task, by_metric in rows.items():
        lines.append(task + "," + ",".join(_fmt(by_metric[k]["p"]) for k in keys))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metric_means(path: str | Path) -> dict[str, dict[str, float]]:
    """Load the per-region 'mean' rows of a metrics.csv back into a table."""
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    key_pos = {k: i for i, k in enumerate(header)}
    out: dict[str, dict[str, float]] = {}
    for line in lines[1:]:
        cells = line.split(",")
        if cells[1] != "mean":
            continue
        out[cells[0]] = {k: float(cells[key_pos[k]]) for k in _ALL_KEYS}
    return out
