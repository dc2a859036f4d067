"""Frozen-encoder classification: pretrain, pool the 24-dim contexts, train
the one-hidden-layer head on a stratified 80% split and evaluate on the rest,
then run leave-one-subject-out CV.
"""

import numpy as np

from nirskill.data import load_montage, builtin_montage_path
from nirskill.evaluate import (
    confusion,
    loso_cv,
    metrics,
    pr_curve,
    roc_curve,
    stratified_holdout,
)
from nirskill.model import ModelConfig, build_classifier, build_model, head_probs
from nirskill.preprocess import PreprocessConfig, apply_norm, fit_norm, preprocess_full, preprocess_raw
from nirskill.synth import ScenarioConfig, iter_scenario_trials
from nirskill.train import TrainConfig, compute_contexts, pretrain, train_head

montage = load_montage(builtin_montage_path("custom"))
pcfg = PreprocessConfig()
scenario = ScenarioConfig(seed=17, n_subjects=4, days=1, trials_per_day=12,
                          duration_min_s=50.0, duration_max_s=70.0)
region = "RPFC"

trials, labels, subjects = [], [], []
raw_series, target_series = [], []
for trial, _ in iter_scenario_trials(scenario, montage, pcfg):
    trials.append(trial)
    labels.append(trial.label)
    subjects.append(trial.subject_id)
    raw_series.append(preprocess_raw(trial, pcfg, montage, region))
    target_series.append(preprocess_full(trial, pcfg, montage, region))
labels = np.array(labels)
subjects = np.array(subjects)
print(f"{len(trials)} trials: {labels.sum()} unsuccessful / "
      f"{len(labels) - labels.sum()} successful")

inputs = [apply_norm(x, fit_norm(raw_series)) for x in raw_series]
targets = [apply_norm(x, fit_norm(target_series)) for x in target_series]

mcfg = ModelConfig(n_ch=len(montage.region_channels(region)))
encoder, report = pretrain(build_model(mcfg, rng=1), inputs, targets,
                           TrainConfig(max_epochs=200), seed=2)
print(f"pretrained: loss {report.epoch_losses[0]:.4f} -> {report.best_loss:.4f}")

contexts = compute_contexts(encoder, inputs)
train_idx, test_idx = stratified_holdout(labels, 0.2, np.random.default_rng(3))
clf = build_classifier(mcfg, encoder, rng=4)
clf, _ = train_head(clf, contexts[train_idx], labels[train_idx],
                    TrainConfig(classifier_epochs=800), seed=5)

scores = head_probs(clf, contexts[test_idx]).data[:, 1]
cm = confusion(scores, labels[test_idx])
vals = metrics(cm)
print(f"\nheld-out split ({len(test_idx)} trials): "
      f"tp={cm.tp} fp={cm.fp} tn={cm.tn} fn={cm.fn}")
for key in ("accuracy", "sensitivity", "specificity", "mcc", "balanced_accuracy"):
    print(f"  {key:18s} {vals[key]:.3f}")
print(f"  roc_auc            {roc_curve(scores, labels[test_idx]).auc:.3f}")
print(f"  pr_auc             {pr_curve(scores, labels[test_idx]).auc:.3f}")


def train_fn(idx, seed):
    c = build_classifier(mcfg, encoder, rng=seed)
    c, _ = train_head(c, contexts[idx], labels[idx],
                      TrainConfig(classifier_epochs=500), seed=seed)
    return c


def score_fn(c, idx):
    return head_probs(c, contexts[idx]).data[:, 1]


subject_scores, summary = loso_cv(labels, subjects, train_fn, score_fn, master_seed=6)
print("\nleave-one-subject-out:")
for s in subject_scores:
    print(f"  {s.subject}: MCE {s.mce:.3f} over {s.n_trials} trials")
print(f"  mean MCE {summary['mean_mce']:.3f} (SD {summary['sd_mce']:.3f})")
