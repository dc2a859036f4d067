"""Self-supervised pretraining of the conv encoder-decoder on a small
synthetic set: band-limited OD in, clean chromophores out, masked MSE on the
first 25 timepoints. Shows checkpointing and the weight-file round trip.
"""

import tempfile
from pathlib import Path

import numpy as np

from nirskill.data import load_montage, builtin_montage_path
from nirskill.model import ModelConfig, build_model, count_params, load_model, save_model
from nirskill.preprocess import PreprocessConfig, apply_norm, fit_norm, preprocess_full, preprocess_raw
from nirskill.synth import ScenarioConfig, iter_scenario_trials
from nirskill.train import TrainConfig, pretrain

montage = load_montage(builtin_montage_path("custom"))
pcfg = PreprocessConfig()
scenario = ScenarioConfig(
    seed=13, n_subjects=3, days=1, trials_per_day=10,
    duration_min_s=50.0, duration_max_s=70.0,
)
region = "RPFC"

raw_series, target_series = [], []
for trial, _truth in iter_scenario_trials(scenario, montage, pcfg):
    raw_series.append(preprocess_raw(trial, pcfg, montage, region))
    target_series.append(preprocess_full(trial, pcfg, montage, region))

in_stats, tg_stats = fit_norm(raw_series), fit_norm(target_series)
inputs = [apply_norm(x, in_stats) for x in raw_series]
targets = [apply_norm(x, tg_stats) for x in target_series]
print(f"{len(inputs)} trials, {inputs[0].shape[1]} columns, "
      f"lengths {min(len(x) for x in inputs)}..{max(len(x) for x in inputs)}")

n_ch = len(montage.region_channels(region))
model = build_model(ModelConfig(n_ch=n_ch), rng=3)
print(f"model parameters: {count_params(model)}")

best, report = pretrain(model, inputs, targets,
                        TrainConfig(max_epochs=150, lr_step_size=50), seed=9)
losses = report.epoch_losses
print(f"\nepoch    0: loss {losses[0]:.5f}")
for mark in (10, 50, 100, len(losses) - 1):
    print(f"epoch {mark:4d}: loss {losses[mark]:.5f}")
print(f"best checkpoint: epoch {report.best_epoch}, loss {report.best_loss:.5f} "
      f"({report.best_loss / losses[0]:.1%} of epoch 0), stop: {report.stop_reason}")

out = Path(tempfile.mkdtemp(prefix="nirskill_demo_")) / "encoder.wgt"
save_model(best, out)
reloaded = load_model(out, best.config)
assert all(
    np.allclose(best.params[k].data, reloaded.params[k].data, atol=1e-7)
    for k in best.params
)
print(f"\nweights saved and reloaded from {out}")
