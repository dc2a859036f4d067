"""Raw-intensity to model-ready series: OD, band-pass, motion correction,
modified Beer-Lambert, downsampling and 0-1 normalization.

Two pipeline compositions are exposed:

  preprocess_raw   OD -> band-pass -> downsample            (model input)
  preprocess_full  OD -> spline motion correction -> band-pass -> MBLL
                   -> downsample                            (pretraining target)

Columns follow the trial layout: per channel, wavelength 760 then 850 for
intensity/OD, and HbO then HbR for chromophores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import make_smoothing_spline
from scipy.signal import butter, filtfilt, firwin, sosfiltfilt

from .data import Channel, Montage, TrialRecording, select_region

__all__ = [
    "SplineConfig",
    "PreprocessConfig",
    "NormalizationStats",
    "OpticalDensity",
    "load_extinction_table",
    "beer_lambert_matrix",
    "intensity_to_od",
    "bandpass",
    "detect_motion_segments",
    "spline_correct",
    "mbll",
    "downsample",
    "fit_norm",
    "apply_norm",
    "preprocess_raw",
    "preprocess_full",
]

_SINGULAR_TOL = 1e-12


def load_extinction_table(path: str | Path | None = None) -> tuple[tuple[float, float, float], ...]:
    """Rows of (wavelength_nm, eps_hbo, eps_hbr), sorted by wavelength.

    Units cm^-1 (mol/L)^-1. The default table ships with the package;
    '#' lines are comments.
    """
    if path is None:
        path = resources.files("nirskill.assets").joinpath("extinction_hb.csv")
    rows = []
    with open(str(path)) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("wavelength"):
                continue
            wl, hbo, hbr = line.split(",")
            rows.append((float(wl), float(hbo), float(hbr)))
    if len(rows) < 2:
        raise ValueError(f"extinction table {path}: need at least two wavelengths")
    return tuple(sorted(rows))


@dataclass(frozen=True)
class SplineConfig:
    smoothing_p: float = 0.99    # csaps-style p; lam = (1 - p) / p
    window_s: float = 2.0
    std_thresh: float = 5.0      # multiple of the channel's median moving SD
    amp_thresh: float = 0.4      # OD peak-to-peak within one window


@dataclass(frozen=True)
class PreprocessConfig:
    band_low_hz: float = 0.01
    band_high_hz: float = 0.1
    filter_order: int = 3
    downsample_factor: int = 8
    ppf: tuple[float, float] = (0.1, 0.1)
    extinction: tuple[tuple[float, float, float], ...] = field(
        default_factory=load_extinction_table
    )
    spline: SplineConfig = field(default_factory=SplineConfig)
    motion_correct_first: bool = True
    min_len_samples: int = 17

    def __post_init__(self):
        if not 0 < self.band_low_hz < self.band_high_hz:
            raise ValueError("need 0 < band_low_hz < band_high_hz")
        if self.filter_order < 1 or self.downsample_factor < 1:
            raise ValueError("filter_order and downsample_factor must be >= 1")
        if any(p <= 0 for p in self.ppf):
            raise ValueError("ppf components must be positive")
        e = np.array([[r[1], r[2]] for r in self.extinction[:2]])
        if abs(np.linalg.det(e)) < _SINGULAR_TOL:
            raise ValueError("extinction matrix is singular")

    def check_rates(self, sample_rate_hz: float) -> None:
        nyq_after = sample_rate_hz / self.downsample_factor / 2.0
        if not self.band_high_hz < nyq_after:
            raise ValueError(
                f"band_high_hz {self.band_high_hz} not below post-downsample "
                f"Nyquist {nyq_after:.4f}"
            )


def beer_lambert_matrix(cfg: PreprocessConfig, wavelengths_nm, separation_cm: float) -> np.ndarray:
    """2x2 map A with dOD[wl] = sum_c A[wl, c] * dC_mol[c], c in (HbO, HbR)."""
    wls = sorted(float(w) for w in wavelengths_nm)
    table = {row[0]: (row[1], row[2]) for row in cfg.extinction}
    rows = []
    for wl, ppf in zip(wls, cfg.ppf):
        if wl not in table:
            raise ValueError(f"no extinction entry for wavelength {wl} nm")
        eps_hbo, eps_hbr = table[wl]
        rows.append([eps_hbo * separation_cm * ppf, eps_hbr * separation_cm * ppf])
    a = np.array(rows)
    if abs(np.linalg.det(a)) < _SINGULAR_TOL:
        raise ValueError("Beer-Lambert system is singular")
    return a


@dataclass(frozen=True)
class OpticalDensity:
    """dOD matrix plus the per-column intensity reference means."""

    values: np.ndarray
    reference_mean: np.ndarray


def intensity_to_od(raw: np.ndarray) -> OpticalDensity:
    """dOD[t, c] = -log10(I[t, c] / mean_t I[., c]); requires I > 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw <= 0):
        t, c = np.argwhere(raw <= 0)[0]
        raise ValueError(f"nonpositive intensity at row {t}, column {c}")
    ref = raw.mean(axis=0)
    return OpticalDensity(values=-np.log10(raw / ref), reference_mean=ref)


def bandpass(x: np.ndarray, sample_rate_hz: float, cfg: PreprocessConfig) -> np.ndarray:
    """Zero-phase Butterworth band-pass (forward-backward), per column."""
    x = np.asarray(x, dtype=np.float64)
    ncoef = 2 * cfg.filter_order + 1
    if x.shape[0] <= 3 * ncoef:
        raise ValueError(
            f"series of length {x.shape[0]} too short for stable filtering "
            f"(need > {3 * ncoef})"
        )
    if not cfg.band_high_hz < sample_rate_hz / 2:
        raise ValueError("band_high_hz must lie below Nyquist")
    # Second-order sections: the polynomial form of this filter is badly
    # conditioned at band edges this far below Nyquist.
    sos = butter(
        cfg.filter_order,
        [cfg.band_low_hz, cfg.band_high_hz],
        btype="band",
        fs=sample_rate_hz,
        output="sos",
    )
    # Reflection padding must cover the high-pass settle time (~1/band_low),
    # or out-of-band content near the record edges leaks into the band.
    padlen = min(x.shape[0] - 1, max(3 * ncoef, int(round(3.0 * sample_rate_hz / cfg.band_low_hz))))
    return sosfiltfilt(sos, x, axis=0, padlen=padlen)


def _moving_windows(x: np.ndarray, w: int) -> np.ndarray:
    # (n - w + 1, w, n_cols) windows along time
    from numpy.lib.stride_tricks import sliding_window_view

    return sliding_window_view(x, w, axis=0).transpose(0, 2, 1)


def detect_motion_segments(
    od: np.ndarray, sample_rate_hz: float, spline_cfg: SplineConfig
) -> list[tuple[int, int]]:
    """Flag windows with excessive moving SD or peak-to-peak amplitude.

    A window is suspicious when any channel's SD exceeds std_thresh times
    that channel's median moving SD, or its range exceeds amp_thresh.
    Overlapping or touching windows merge into one segment (start, end],
    half-open sample indices.
    """
    od = np.asarray(od, dtype=np.float64)
    n = od.shape[0]
    w = max(2, round(spline_cfg.window_s * sample_rate_hz))
    if n < w:
        return []
    win = _moving_windows(od, w)                         # (n-w+1, w, C)
    sd = win.std(axis=1)                                 # (n-w+1, C)
    ptp = win.max(axis=1) - win.min(axis=1)
    base = np.median(sd, axis=0)
    base = np.where(base > 0, base, np.inf)              # silent channel: SD rule off
    hit = (sd > spline_cfg.std_thresh * base) | (ptp > spline_cfg.amp_thresh)
    starts = np.flatnonzero(hit.any(axis=1))
    segments: list[tuple[int, int]] = []
    for s in starts:
        beg, end = int(s), int(s) + w
        if segments and beg <= segments[-1][1]:
            segments[-1] = (segments[-1][0], max(segments[-1][1], end))
        else:
            segments.append((beg, end))
    return [(b, min(e, n)) for b, e in segments]


def spline_correct(
    od: np.ndarray, segments: list[tuple[int, int]], spline_cfg: SplineConfig | None = None
) -> np.ndarray:
    """Subtract a smoothing-spline fit inside each flagged segment and
    re-level the residual with a linear ramp joining the untouched samples
    on either side. Samples outside segments are returned bit-unchanged.
    """
    spline_cfg = spline_cfg or SplineConfig()
    od = np.asarray(od, dtype=np.float64)
    if not segments:
        return od
    out = od.copy()
    n = od.shape[0]
    lam = (1.0 - spline_cfg.smoothing_p) / spline_cfg.smoothing_p
    for beg, end in segments:
        if not 0 <= beg < end <= n:
            raise ValueError(f"segment ({beg}, {end}) out of bounds for length {n}")
        m = end - beg
        if m < 4:
            warnings.warn(f"skipping motion segment ({beg}, {end}): shorter than 4 samples")
            continue
        t = np.arange(m, dtype=np.float64)
        for c in range(od.shape[1]):
            seg = od[beg:end, c]
            if m >= 5:
                trend = make_smoothing_spline(t, seg, lam=lam)(t)
            else:
                trend = np.polyval(np.polyfit(t, seg, 3), t)
            residual = seg - trend
            left = od[beg - 1, c] if beg > 0 else None
            right = od[end, c] if end < n else None
            if left is None and right is None:
                level = np.full(m, seg.mean())
            elif left is None:
                level = np.full(m, right)
            elif right is None:
                level = np.full(m, left)
            else:
                level = np.linspace(left, right, m)
            out[beg:end, c] = residual + level
    return out


def mbll(od: np.ndarray, cfg: PreprocessConfig, channels: list[Channel],
         wavelengths_nm=(760.0, 850.0)) -> np.ndarray:
    """Invert the modified Beer-Lambert law channel by channel.

    Input columns are (chan0@wl_lo, chan0@wl_hi, chan1@wl_lo, ...); output
    columns are (chan0:HbO, chan0:HbR, ...) in umol/L.
    """
    od = np.asarray(od, dtype=np.float64)
    if od.shape[1] != 2 * len(channels):
        raise ValueError(
            f"OD has {od.shape[1]} columns, expected {2 * len(channels)} "
            "(both wavelengths per channel)"
        )
    conc = np.empty_like(od)
    inv_cache: dict[float, np.ndarray] = {}
    for i, ch in enumerate(channels):
        inv = inv_cache.get(ch.separation_cm)
        if inv is None:
            a = beer_lambert_matrix(cfg, wavelengths_nm, ch.separation_cm)
            inv = np.linalg.inv(a)
            inv_cache[ch.separation_cm] = inv
        conc[:, 2 * i : 2 * i + 2] = 1e6 * od[:, 2 * i : 2 * i + 2] @ inv.T
    return conc


def downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Anti-alias FIR low-pass (zero phase) then decimate by `factor`."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy()
    numtaps = 8 * factor + 1
    h = firwin(numtaps, 1.0 / factor)
    padlen = min(3 * numtaps, x.shape[0] - 1)
    smoothed = filtfilt(h, [1.0], x, axis=0, padlen=padlen)
    return smoothed[::factor]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-column (min, max) pooled over the training trials."""

    col_min: np.ndarray
    col_max: np.ndarray

    def __post_init__(self):
        if np.any(self.col_max < self.col_min):
            raise ValueError("normalization stats require max >= min")

    @property
    def scale(self) -> np.ndarray:
        span = self.col_max - self.col_min
        return np.where(span > 0, span, 1.0)  # degenerate column: scale 1

    def to_dict(self) -> dict:
        return {"min": self.col_min.tolist(), "max": self.col_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["min"], float), np.asarray(d["max"], float))


def fit_norm(trials: list[np.ndarray]) -> NormalizationStats:
    if not trials:
        raise ValueError("fit_norm needs at least one trial")
    mins = np.min([t.min(axis=0) for t in trials], axis=0)
    maxs = np.max([t.max(axis=0) for t in trials], axis=0)
    return NormalizationStats(col_min=mins, col_max=maxs)


def apply_norm(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """y = (x - min) / (max - min); values outside [0, 1] are NOT clipped."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != stats.col_min.shape[0]:
        raise ValueError(
            f"series has {x.shape[1]} columns, stats cover {stats.col_min.shape[0]}"
        )
    return (x - stats.col_min) / stats.scale


def _guard_min_len(x: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    if x.shape[0] < cfg.min_len_samples:
        raise ValueError(
            f"trial has {x.shape[0]} timepoints after downsampling "
            f"(< {cfg.min_len_samples})"
        )
    return x


def preprocess_raw(
    trial: TrialRecording, cfg: PreprocessConfig, montage: Montage, region: str | None
) -> np.ndarray:
    """Band-limited OD at the downsampled rate: the end-to-end model input."""
    cfg.check_rates(montage.sample_rate_hz)
    restricted = select_region(trial, montage, region)
    od = intensity_to_od(restricted.raw).values
    bp = bandpass(od, montage.sample_rate_hz, cfg)
    return _guard_min_len(downsample(bp, cfg.downsample_factor), cfg)


def preprocess_full(
    trial: TrialRecording, cfg: PreprocessConfig, montage: Montage, region: str | None
) -> np.ndarray:
    """Fully processed dHbO/dHbR (umol/L): pretraining target, baseline input."""
    cfg.check_rates(montage.sample_rate_hz)
    restricted = select_region(trial, montage, region)
    chans = (
        montage.long_channels if region is None else montage.region_channels(region)
    )
    od = intensity_to_od(restricted.raw).values
    fs = montage.sample_rate_hz
    if cfg.motion_correct_first:
        od = spline_correct(od, detect_motion_segments(od, fs, cfg.spline), cfg.spline)
        bp = bandpass(od, fs, cfg)
    else:
        bp = bandpass(od, fs, cfg)
        bp = spline_correct(bp, detect_motion_segments(bp, fs, cfg.spline), cfg.spline)
    conc = mbll(bp, cfg, list(chans), montage.wavelengths_nm)
    return _guard_min_len(downsample(conc, cfg.downsample_factor), cfg)
