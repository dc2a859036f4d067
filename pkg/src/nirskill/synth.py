"""Labeled synthetic fNIRS trials with known chromophore ground truth.

The forward model inverts the preprocessing chain: band-limited hemodynamic
responses (double-gamma HRF convolved with task events) per region are
mapped to optical density with the same extinction/pathlength constants
that `preprocess.mbll` inverts, systemic oscillations, drift, white noise
and motion artifacts are added in OD space, and intensities follow
I = I0 * 10^(-OD).

All randomness derives from counter-based Philox streams keyed per
(seed, subject, day, trial), so trials are reproducible individually and
generation order does not matter.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .data import (
    LABEL_UNSUCCESSFUL,
    DatasetManifest,
    Montage,
    TrialRecording,
    builtin_montage_path,
    chromophore_column_names,
    intensity_column_names,
    load_manifest,
    load_montage,
    write_trial_csv,
)
from .preprocess import PreprocessConfig, bandpass, beer_lambert_matrix

__all__ = [
    "ScenarioConfig",
    "SubjectParams",
    "GroundTruth",
    "hrf",
    "subject_params",
    "trial_rng",
    "simulate_trial",
    "generate_dataset",
    "resolve_montage",
]

# substream namespaces under the master seed
_DOM_SUBJECT = 1
_DOM_TRIAL = 2
_DOM_LABELS = 3


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 7
    montage: str = "custom"
    n_subjects: int = 6
    days: int = 2
    trials_per_day: int = 20
    duration_min_s: float = 60.0
    duration_max_s: float = 96.0
    positive_fraction: float = 5.0 / 6.0
    # class effect: positive-label trials scale the HRF amplitude in these regions
    effect_regions: tuple[str, ...] = ("RPFC", "RMC")
    effect_multiplier: float = 2.2
    base_amp_um: float = 1.0
    hbr_ratio: float = 0.35
    event_spacing_s: float = 20.0
    event_jitter_s: float = 2.0
    event_duration_s: float = 5.0
    event_start_s: float = 10.0
    event_tail_s: float = 12.0
    # systemic (extracerebral) oscillations, expressed as scalp chromophore
    # fluctuations in umol/L so both wavelengths see them coherently
    cardiac_hz: float = 1.1
    cardiac_amp_um: float = 0.06
    resp_hz: float = 0.25
    resp_amp_um: float = 0.06
    mayer_hz: float = 0.1
    mayer_amp_um: float = 0.08
    systemic_hbr_ratio: float = 0.2
    drift_od_per_s: float = 2.0e-6
    white_sd_od: float = 8.0e-6
    # Off in the default separable scenario: at desk scale (~240 trials) a
    # 0.05 OD artifact swamps the raw branch, which by design does not
    # motion-correct. Dedicated scenarios turn this on.
    motion_rate_per_min: float = 0.0
    motion_step_od: float = 0.05
    motion_spike_od: float = 0.08
    baseline_intensity: float = 1.0
    subject_sd: float = 0.10
    channel_gain_sd: float = 0.05
    trial_index_decay: float = 0.0

    def __post_init__(self):
        if self.duration_min_s > self.duration_max_s:
            raise ValueError("duration_min_s must be <= duration_max_s")
        for name in (
            "base_amp_um", "cardiac_amp_um", "resp_amp_um", "mayer_amp_um",
            "white_sd_od", "motion_step_od", "motion_spike_od",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must be in [0, 1]")
        if self.effect_regions and self.effect_multiplier == 1.0:
            raise ValueError(
                "effect_multiplier must differ from 1.0 when effect regions are set"
            )

    @property
    def n_trials(self) -> int:
        return self.n_subjects * self.days * self.trials_per_day

    def check_durations(self, sample_rate_hz: float, preprocess_cfg: PreprocessConfig) -> None:
        need = preprocess_cfg.min_len_samples * preprocess_cfg.downsample_factor / sample_rate_hz
        if self.duration_min_s < need:
            raise ValueError(
                f"duration_min_s {self.duration_min_s} below the exclusion floor "
                f"{need:.1f} s (min_len x downsample / fs)"
            )
        if self.duration_min_s < self.event_start_s + self.event_tail_s:
            raise ValueError("trials too short to contain any task event")


def resolve_montage(name_or_path: str) -> Montage:
    p = Path(name_or_path)
    if p.exists():
        return load_montage(p)
    return load_montage(builtin_montage_path(name_or_path))


def _gamma_pdf(t: np.ndarray, shape: float, scale: float) -> np.ndarray:
    tt = np.maximum(t, 0.0) / scale
    out = np.zeros_like(tt)
    pos = tt > 0
    out[pos] = np.exp(
        (shape - 1.0) * np.log(tt[pos]) - tt[pos] - gammaln(shape)
    ) / scale
    return out


def _hrf_unnormalized(t: np.ndarray) -> np.ndarray:
    peak = _gamma_pdf(t, 6.0 / 0.9, 0.9)
    undershoot = _gamma_pdf(t, 16.0 / 0.9, 0.9)
    return peak - 0.35 * undershoot


_HRF_GRID = np.arange(0.0, 40.0, 1e-3)
_HRF_PEAK = float(_hrf_unnormalized(_HRF_GRID).max())


def hrf(t) -> np.ndarray:
    """Canonical double-gamma response, unit peak: rises to ~1 near 5-6 s,
    undershoots near 15-16 s and returns to baseline by ~25 s."""
    t = np.asarray(t, dtype=np.float64)
    return _hrf_unnormalized(t) / _HRF_PEAK


@dataclass(frozen=True)
class SubjectParams:
    amp_factor: float
    channel_gains: np.ndarray  # one multiplicative gain per long channel


def subject_params(scenario: ScenarioConfig, montage: Montage, subject_idx: int) -> SubjectParams:
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((scenario.seed, _DOM_SUBJECT, subject_idx)))
    )
    amp = max(0.4, 1.0 + scenario.subject_sd * rng.standard_normal())
    gains = np.maximum(0.4, 1.0 + scenario.channel_gain_sd * rng.standard_normal(montage.n_long))
    return SubjectParams(amp_factor=amp, channel_gains=gains)


def trial_rng(seed: int, subject_idx: int, day: int, trial: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, _DOM_TRIAL, subject_idx, day, trial)))
    )


@dataclass(frozen=True)
class GroundTruth:
    """True chromophore dynamics plus the injected-artifact log."""

    hbo: np.ndarray                      # (tau_raw, n_ch), umol/L
    hbr: np.ndarray
    segments: tuple[tuple[int, int], ...]  # sample-index spans of motion events
    label: int

    def chromophores(self) -> np.ndarray:
        """Interleave HbO/HbR per channel to match preprocess_full columns."""
        n, c = self.hbo.shape
        out = np.empty((n, 2 * c))
        out[:, 0::2] = self.hbo
        out[:, 1::2] = self.hbr
        return out


def _event_response(n: int, fs: float, scenario: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit-peak hemodynamic response train for one trial."""
    duration = n / fs
    onsets = []
    t = scenario.event_start_s
    while t < duration - scenario.event_tail_s:
        jitter = scenario.event_jitter_s * rng.uniform(-1.0, 1.0)
        onsets.append(max(0.0, t + jitter))
        t += scenario.event_spacing_s
    stim = np.zeros(n)
    width = max(1, round(scenario.event_duration_s * fs))
    for onset in onsets:
        i = int(round(onset * fs))
        stim[i : i + width] = 1.0
    kernel = hrf(np.arange(0.0, 32.0, 1.0 / fs))
    resp = np.convolve(stim, kernel)[:n]
    peak = np.abs(resp).max()
    return resp / peak if peak > 0 else resp


def simulate_trial(
    label: int,
    subject: SubjectParams,
    scenario: ScenarioConfig,
    montage: Montage,
    rng: np.random.Generator,
    preprocess_cfg: PreprocessConfig | None = None,
    subject_id: str = "S01",
    day: int = 1,
    trial_index: int = 1,
    task: str = "custom",
) -> tuple[TrialRecording, GroundTruth]:
    """Forward-model one trial. Deterministic given the rng state."""
    cfg = preprocess_cfg or PreprocessConfig()
    fs = montage.sample_rate_hz
    scenario.check_durations(fs, cfg)
    chans = montage.long_channels
    n_ch = len(chans)

    duration = rng.uniform(scenario.duration_min_s, scenario.duration_max_s)
    n = int(round(duration * fs))
    t = np.arange(n) / fs

    response = _event_response(n, fs, scenario, rng)

    decay = max(0.0, 1.0 - scenario.trial_index_decay * (trial_index - 1))
    region_amp = {}
    for region in montage.regions():
        mult = (
            scenario.effect_multiplier
            if (label == LABEL_UNSUCCESSFUL and region in scenario.effect_regions)
            else 1.0
        )
        region_amp[region] = scenario.base_amp_um * mult * subject.amp_factor * decay

    amps = np.array([region_amp[c.region] for c in chans]) * subject.channel_gains
    hbo = response[:, None] * amps[None, :]
    hbr = -scenario.hbr_ratio * hbo

    # Truth is defined band-limited: cortical signal within the analysis band.
    hbo = bandpass(hbo, fs, cfg)
    hbr = bandpass(hbr, fs, cfg)

    # systemic physiology as scalp chromophore fluctuations: one phase per
    # source per trial, small per-channel jitter, seen by both wavelengths
    sys_hbo = np.zeros((n, n_ch))
    for freq, amp in (
        (scenario.cardiac_hz, scenario.cardiac_amp_um),
        (scenario.resp_hz, scenario.resp_amp_um),
        (scenario.mayer_hz, scenario.mayer_amp_um),
    ):
        if amp > 0:
            phase = rng.uniform(0.0, 2.0 * np.pi)
            jitter = rng.uniform(-0.3, 0.3, size=n_ch)
            sys_hbo += amp * np.sin(
                2.0 * np.pi * freq * t[:, None] + phase + jitter[None, :]
            )
    sys_hbr = -scenario.systemic_hbr_ratio * sys_hbo

    # forward Beer-Lambert, per channel (umol/L -> mol/L inside)
    od = np.empty((n, 2 * n_ch))
    for i, ch in enumerate(chans):
        a = beer_lambert_matrix(cfg, montage.wavelengths_nm, ch.separation_cm)
        conc = np.column_stack([hbo[:, i] + sys_hbo[:, i], hbr[:, i] + sys_hbr[:, i]])
        od[:, 2 * i : 2 * i + 2] = 1e-6 * conc @ a.T

    # instrument drift and sensor noise live in OD space
    if scenario.drift_od_per_s:
        slopes = scenario.drift_od_per_s * rng.uniform(-1.0, 1.0, size=2 * n_ch)
        od += t[:, None] * slopes[None, :]
    if scenario.white_sd_od:
        od += scenario.white_sd_od * rng.standard_normal((n, 2 * n_ch))

    # motion artifacts: steps persist, spikes decay over ~1 s; all channels
    segments: list[tuple[int, int]] = []
    n_events = rng.poisson(scenario.motion_rate_per_min * duration / 60.0)
    fs_int = max(1, int(round(fs)))
    for _ in range(n_events):
        at = int(rng.integers(2 * fs_int, max(2 * fs_int + 1, n - 2 * fs_int)))
        scale = rng.uniform(0.5, 1.5, size=2 * n_ch) * rng.choice((-1.0, 1.0))
        if rng.random() < 0.5 and scenario.motion_step_od > 0:
            od[at:] += scenario.motion_step_od * scale[None, :]
        elif scenario.motion_spike_od > 0:
            width = np.arange(n - at) / fs
            od[at:] += (
                scenario.motion_spike_od
                * np.exp(-width / 0.4)[:, None]
                * scale[None, :]
            )
        lo = max(0, at - fs_int)
        hi = min(n, at + 3 * fs_int)
        segments.append((lo, hi))

    raw = scenario.baseline_intensity * 10.0 ** (-od)
    trial = TrialRecording(
        subject_id=subject_id,
        task=task,
        day=day,
        trial_index=trial_index,
        label=label,
        channels=tuple(c.id for c in chans),
        raw=raw,
    )
    truth = GroundTruth(hbo=hbo, hbr=hbr, segments=tuple(segments), label=label)
    return trial, truth


def _allocate_labels(scenario: ScenarioConfig) -> np.ndarray:
    """Exact class counts: round(total * positive_fraction) positives, shuffled."""
    total = scenario.n_trials
    n_pos = round(total * scenario.positive_fraction)
    labels = np.zeros(total, dtype=np.int64)
    labels[:n_pos] = 1
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((scenario.seed, _DOM_LABELS)))
    )
    return rng.permutation(labels)


def iter_scenario_trials(
    scenario: ScenarioConfig,
    montage: Montage,
    preprocess_cfg: PreprocessConfig | None = None,
):
    """Yield (trial, truth) for the whole scenario grid, deterministically."""
    labels = _allocate_labels(scenario)
    params = [subject_params(scenario, montage, s) for s in range(scenario.n_subjects)]
    idx = 0
    for s in range(scenario.n_subjects):
        sid = f"S{s + 1:02d}"
        for day in range(1, scenario.days + 1):
            for tr in range(1, scenario.trials_per_day + 1):
                rng = trial_rng(scenario.seed, s, day, tr)
                yield simulate_trial(
                    int(labels[idx]),
                    params[s],
                    scenario,
                    montage,
                    rng,
                    preprocess_cfg,
                    subject_id=sid,
                    day=day,
                    trial_index=tr,
                )
                idx += 1


def generate_dataset(
    scenario: ScenarioConfig,
    out_dir: str | Path,
    preprocess_cfg: PreprocessConfig | None = None,
    montage_path: str | Path | None = None,
) -> DatasetManifest:
    """Write trial CSVs, ground-truth files and a manifest under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trials").mkdir(exist_ok=True)

    if montage_path is None:
        src = Path(scenario.montage)
        if not src.exists():
            src = builtin_montage_path(scenario.montage)
    else:
        src = Path(montage_path)
    montage = load_montage(src)
    shutil.copyfile(src, out / "montage.json")

    fs = montage.sample_rate_hz
    intensity_cols = intensity_column_names([c.id for c in montage.long_channels])
    chromo_cols = chromophore_column_names([c.id for c in montage.long_channels])

    records = []
    for trial, truth in iter_scenario_trials(scenario, montage, preprocess_cfg):
        stem = f"{trial.subject_id}_d{trial.day:02d}_t{trial.trial_index:02d}"
        t_s = np.arange(trial.n_samples) / fs
        write_trial_csv(out / "trials" / f"{stem}.csv", t_s, trial.raw, intensity_cols)
        write_trial_csv(
            out / "trials" / f"{stem}_truth.csv", t_s, truth.chromophores(), chromo_cols
        )
        with open(out / "trials" / f"{stem}_segments.json", "w") as fh:
            json.dump({"label": truth.label, "segments": list(truth.segments)}, fh)
        duration = trial.n_samples / fs
        records.append(
            {
                "subject": trial.subject_id,
                "task": trial.task,
                "day": trial.day,
                "trial": trial.trial_index,
                "label": trial.label,
                "duration_s": round(duration, 6),
                "logged_duration_s": round(duration, 6),
                "path": f"trials/{stem}.csv",
            }
        )

    manifest_doc = {
        "montage": "montage.json",
        "max_duration_s": scenario.duration_max_s + 1.0,
        "records": records,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest_doc, fh, indent=1)
    return load_manifest(out / "manifest.json")


def scenario_to_dict(scenario: ScenarioConfig) -> dict:
    return asdict(scenario)
