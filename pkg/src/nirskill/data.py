"""Montage and dataset-manifest types, region projection, exclusion rules.

File contracts
--------------
Montage: JSON with wavelengths_nm, sample_rate_hz and a channel list
(id/source_id/detector_id/separation_cm/region/kind).

Manifest: JSON {montage, max_duration_s, records: [...]} where each record
holds subject/task/day/trial/label/duration_s and optional fls_score /
logged_duration_s plus the trial CSV path.

Trial CSV: first column t_s, then one raw-intensity column per
channel x wavelength named `<channel_id>@<wavelength>`, channels in montage
order with 760 before 850 within each channel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "REGIONS",
    "TASKS",
    "LABEL_SUCCESSFUL",
    "LABEL_UNSUCCESSFUL",
    "Channel",
    "Montage",
    "TrialRecording",
    "ManifestRecord",
    "DatasetManifest",
    "load_montage",
    "builtin_montage_path",
    "load_manifest",
    "select_region",
    "apply_exclusions",
    "read_trial_csv",
    "write_trial_csv",
    "intensity_column_names",
    "chromophore_column_names",
]

REGIONS = (
    "LPFC", "RPFC", "LSMA", "RSMA", "LSMC", "RSMC", "LPAR", "RPAR",
    "SMA", "LMC", "RMC",
)
TASKS = ("FLS_S", "FLS_PC", "ETI", "custom")

# Trials labeled successful are the negative class.
LABEL_SUCCESSFUL = 0
LABEL_UNSUCCESSFUL = 1

MIN_LEN_SAMPLES = 17


@dataclass(frozen=True)
class Channel:
    id: str
    source_id: str
    detector_id: str
    separation_cm: float
    region: str
    kind: str  # "long" or "short"

    def __post_init__(self):
        if self.kind not in ("long", "short"):
            raise ValueError(f"channel {self.id}: kind must be long or short")
        if self.region not in REGIONS:
            raise ValueError(f"channel {self.id}: unknown region {self.region!r}")
        lo, hi = (2.5, 3.5) if self.kind == "long" else (0.5, 1.1)
        if not lo <= self.separation_cm <= hi:
            raise ValueError(
                f"channel {self.id}: separation {self.separation_cm} cm outside "
                f"the {self.kind}-channel range [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class Montage:
    wavelengths_nm: tuple[float, float]
    sample_rate_hz: float
    channels: tuple[Channel, ...]

    def __post_init__(self):
        if len(set(self.wavelengths_nm)) != 2:
            raise ValueError("montage needs exactly two distinct wavelengths")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        ids = [c.id for c in self.channels]
        if len(set(ids)) != len(ids):
            raise ValueError("montage channel ids must be unique")

    @property
    def long_channels(self) -> tuple[Channel, ...]:
        return tuple(c for c in self.channels if c.kind == "long")

    @property
    def n_long(self) -> int:
        return len(self.long_channels)

    def regions(self) -> tuple[str, ...]:
        seen: list[str] = []
        for c in self.long_channels:
            if c.region not in seen:
                seen.append(c.region)
        return tuple(seen)

    def region_channels(self, region: str) -> tuple[Channel, ...]:
        if region not in self.regions():
            raise ValueError(f"region {region!r} not present in montage")
        return tuple(c for c in self.long_channels if c.region == region)


def intensity_column_names(channel_ids, wavelengths=(760, 850)) -> list[str]:
    lo, hi = sorted(int(w) for w in wavelengths)
    return [f"{cid}@{w}" for cid in channel_ids for w in (lo, hi)]


def chromophore_column_names(channel_ids) -> list[str]:
    return [f"{cid}:{species}" for cid in channel_ids for species in ("HbO", "HbR")]


@dataclass(frozen=True)
class TrialRecording:
    """One task repetition: raw intensities (tau, 2 * n_ch) plus metadata."""

    subject_id: str
    task: str
    day: int
    trial_index: int
    label: int
    channels: tuple[str, ...]
    raw: np.ndarray

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.day < 1 or self.trial_index < 1:
            raise ValueError("day and trial_index are 1-based")
        if self.label not in (LABEL_SUCCESSFUL, LABEL_UNSUCCESSFUL):
            raise ValueError("label must be 0 (successful) or 1 (unsuccessful)")
        if self.raw.ndim != 2 or self.raw.shape[1] != 2 * len(self.channels):
            raise ValueError(
                f"raw matrix is {self.raw.shape}, expected (tau, {2 * len(self.channels)})"
            )
        if np.any(self.raw <= 0):
            raise ValueError("raw intensities must be strictly positive")

    @property
    def n_samples(self) -> int:
        return self.raw.shape[0]


@dataclass(frozen=True)
class ManifestRecord:
    subject: str
    task: str
    day: int
    trial: int
    label: int
    duration_s: float
    path: str
    fls_score: float | None = None
    logged_duration_s: float | None = None

    def key(self) -> tuple[str, int, int]:
        return (self.subject, self.day, self.trial)


@dataclass(frozen=True)
class DatasetManifest:
    montage_path: str
    max_duration_s: float
    records: tuple[ManifestRecord, ...]
    min_len_samples: int = MIN_LEN_SAMPLES
    base_dir: Path = field(default_factory=Path)

    def label_counts(self) -> tuple[int, int]:
        """(n_positive, n_negative) = (unsuccessful, successful)."""
        pos = sum(1 for r in self.records if r.label == LABEL_UNSUCCESSFUL)
        return pos, len(self.records) - pos

    def subjects(self) -> tuple[str, ...]:
        seen: list[str] = []
        for r in self.records:
            if r.subject not in seen:
                seen.append(r.subject)
        return tuple(seen)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q


def builtin_montage_path(name: str) -> Path:
    """Path to a shipped montage asset: '1010' or 'custom'."""
    fname = {"1010": "montage_1010.json", "custom": "montage_custom.json"}.get(name)
    if fname is None:
        raise ValueError(f"unknown builtin montage {name!r} (use '1010' or 'custom')")
    return Path(str(resources.files("nirskill.assets").joinpath(fname)))


def load_montage(path: str | Path) -> Montage:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    try:
        channels = tuple(
            Channel(
                id=c["id"],
                source_id=c["source_id"],
                detector_id=c["detector_id"],
                separation_cm=float(c["separation_cm"]),
                region=c["region"],
                kind=c["kind"],
            )
            for c in doc["channels"]
        )
        return Montage(
            wavelengths_nm=tuple(float(w) for w in doc["wavelengths_nm"]),
            sample_rate_hz=float(doc["sample_rate_hz"]),
            channels=channels,
        )
    except KeyError as exc:
        raise ValueError(f"montage {path}: missing field {exc}") from None


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a dataset manifest; paths are checked to resolve."""
    path = Path(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"manifest {path}: {exc}") from None
    required = {"subject", "task", "day", "trial", "label", "duration_s", "path"}
    records = []
    for i, rec in enumerate(doc.get("records", [])):
        missing = required - rec.keys()
        if missing:
            raise ValueError(f"manifest record {i}: missing fields {sorted(missing)}")
        records.append(
            ManifestRecord(
                subject=str(rec["subject"]),
                task=str(rec["task"]),
                day=int(rec["day"]),
                trial=int(rec["trial"]),
                label=int(rec["label"]),
                duration_s=float(rec["duration_s"]),
                path=str(rec["path"]),
                fls_score=None if rec.get("fls_score") is None else float(rec["fls_score"]),
                logged_duration_s=(
                    None
                    if rec.get("logged_duration_s") is None
                    else float(rec["logged_duration_s"])
                ),
            )
        )
    for key in ("montage", "max_duration_s"):
        if key not in doc:
            raise ValueError(f"manifest {path}: missing field {key!r}")
    seen: dict[tuple, int] = {}
    for i, rec in enumerate(records):
        if rec.key() in seen:
            raise ValueError(
                f"manifest {path}: duplicate (subject, day, trial) key {rec.key()}"
            )
        seen[rec.key()] = i
    manifest = DatasetManifest(
        montage_path=str(doc["montage"]),
        max_duration_s=float(doc["max_duration_s"]),
        records=tuple(records),
        min_len_samples=int(doc.get("min_len_samples", MIN_LEN_SAMPLES)),
        base_dir=path.parent,
    )
    for rec in manifest.records:
        p = manifest.resolve(rec.path)
        if not p.exists():
            raise ValueError(f"manifest {path}: trial file not found: {p}")
    mp = manifest.resolve(manifest.montage_path)
    if not mp.exists():
        raise ValueError(f"manifest {path}: montage file not found: {mp}")
    return manifest


def select_region(trial: TrialRecording, montage: Montage, region: str | None) -> TrialRecording:
    """Restrict a trial to one region's long channels, in montage order.

    `region=None` keeps every long channel (identity projection when the
    trial already covers exactly the montage).
    """
    if region is None:
        wanted = montage.long_channels
    else:
        wanted = montage.region_channels(region)
    have = {cid: i for i, cid in enumerate(trial.channels)}
    missing = [c.id for c in montage.long_channels if c.id not in have]
    if missing:
        raise ValueError(f"trial does not cover montage long channels: {missing[:4]}...")
    cols: list[int] = []
    for ch in wanted:
        base = 2 * have[ch.id]
        cols.extend((base, base + 1))
    return replace(
        trial,
        channels=tuple(c.id for c in wanted),
        raw=np.ascontiguousarray(trial.raw[:, cols]),
    )


def apply_exclusions(
    manifest: DatasetManifest,
    downsample_factor: int = 8,
    duration_tolerance: float = 0.1,
    sample_rate_hz: float | None = None,
) -> tuple[DatasetManifest, list[tuple[ManifestRecord, str]]]:
    """Drop trials violating the published rules; return (kept, dropped+reason).

    Rules: duration above the task limit, zero FLS score, duration deviating
    from the acquisition log by more than `duration_tolerance` (fractional),
    and fewer than min_len_samples timepoints after downsampling. The sample
    rate defaults to the montage's.
    """
    if sample_rate_hz is None:
        mp = manifest.resolve(manifest.montage_path)
        sample_rate_hz = load_montage(mp).sample_rate_hz if mp.exists() else 5.0863
    kept: list[ManifestRecord] = []
    dropped: list[tuple[ManifestRecord, str]] = []
    for rec in manifest.records:
        reason = None
        n_raw = round(rec.duration_s * sample_rate_hz)
        n_ds = math.ceil(n_raw / downsample_factor)
        if rec.duration_s > manifest.max_duration_s:
            reason = "over-max-duration"
        elif rec.fls_score is not None and rec.fls_score == 0:
            reason = "zero-score"
        elif (
            rec.logged_duration_s is not None
            and abs(rec.duration_s - rec.logged_duration_s)
            > duration_tolerance * rec.logged_duration_s
        ):
            reason = "duration-outlier"
        elif n_ds < manifest.min_len_samples:
            reason = "min-length"
        if reason is None:
            kept.append(rec)
        else:
            dropped.append((rec, reason))
    return replace(manifest, records=tuple(kept)), dropped


def read_trial_csv(path: str | Path, expected_columns: list[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Read a trial CSV -> (intensity matrix without t_s, column names)."""
    path = Path(path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if not header or header[0] != "t_s":
        raise ValueError(f"{path}: first column must be t_s")
    cols = header[1:]
    if expected_columns is not None and cols != list(expected_columns):
        raise ValueError(f"{path}: column mismatch with montage ordering")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return data[:, 1:], cols


def write_trial_csv(path: str | Path, t_s: np.ndarray, values: np.ndarray, columns: list[str]) -> None:
    if values.shape[1] != len(columns):
        raise ValueError("column name count does not match value columns")
    header = ",".join(["t_s", *columns])
    out = np.column_stack([t_s, values])
    np.savetxt(path, out, delimiter=",", header=header, comments="", fmt="%.10g")
