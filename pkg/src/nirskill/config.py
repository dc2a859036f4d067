"""Run configuration: one INI-style document with sections
data/preprocess/synth/model/train/eval. Every pipeline default lives here;
unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .preprocess import PreprocessConfig, SplineConfig, load_extinction_table
from .synth import ScenarioConfig
from .train import TrainConfig

__all__ = ["EvalConfig", "DataConfig", "RunConfig", "load_config", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    montage: str = "custom"
    duration_tolerance: float = 0.1


@dataclass(frozen=True)
class EvalConfig:
    k: int = 15
    stratified: bool = True
    threshold: float = 0.5
    holdout_fraction: float = 0.2
    from_day: int = 10
    trial_cv_folds: int = 3
    workers: int = 1


@dataclass(frozen=True)
class ModelKnobs:
    """ModelConfig fields that live in the config file (n_ch is derived
    from the selected region at run time)."""

    mode: str = "end_to_end"
    se_ratio: int = 4
    se_activation: str = "relu"
    se_placement: str = "all"
    decoder_channel_dropout: float = 1.0 / 6.0
    classifier_hidden: int = 120
    classifier_dropout: float = 0.5
    classifier_l1: float = 1e-4
    classifier_l2: float = 1e-4


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_regions(s: str) -> tuple[str, ...]:
    items = tuple(x.strip() for x in s.split(",") if x.strip())
    return items


_SCENARIO_FIELDS = {f.name: f.type for f in fields(ScenarioConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _parsers_for(dc, special=None):
    out = {}
    special = special or {}
    for f in fields(dc):
        if f.name in special:
            out[f.name] = special[f.name]
        elif f.type in ("int", int):
            out[f.name] = int
        elif f.type in ("float", float):
            out[f.name] = float
        elif f.type in ("bool", bool):
            out[f.name] = _parse_bool
        elif f.type in ("str", str):
            out[f.name] = str
        else:
            out[f.name] = None  # not configurable through the file
    return {k: v for k, v in out.items() if v is not None}


_SECTION_PARSERS: dict[str, dict] = {
    "data": _parsers_for(DataConfig),
    "preprocess": {
        "band_low_hz": float,
        "band_high_hz": float,
        "filter_order": int,
        "downsample_factor": int,
        "ppf_low": float,
        "ppf_high": float,
        "extinction_table": str,
        "spline_smoothing_p": float,
        "spline_window_s": float,
        "spline_std_thresh": float,
        "spline_amp_thresh": float,
        "motion_correct_first": _parse_bool,
        "min_len_samples": int,
    },
    "synth": _parsers_for(ScenarioConfig, special={"effect_regions": _parse_regions}),
    "model": _parsers_for(ModelKnobs),
    "train": _parsers_for(TrainConfig),
    "eval": _parsers_for(EvalConfig),
}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelKnobs = field(default_factory=ModelKnobs)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self, n_ch: int, mode: str | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(
            n_ch=n_ch,
            mode=mode or m.mode,
            se_ratio=m.se_ratio,
            se_activation=m.se_activation,
            se_placement=m.se_placement,
            decoder_channel_dropout=m.decoder_channel_dropout,
            classifier_hidden=m.classifier_hidden,
            classifier_dropout=m.classifier_dropout,
            classifier_l1=m.classifier_l1,
            classifier_l2=m.classifier_l2,
        )

    def to_manifest(self) -> dict:
        """Full resolved configuration for the reproducibility record."""
        from dataclasses import asdict

        doc = {
            "seed": self.seed,
            "data": asdict(self.data),
            "preprocess": asdict(self.preprocess),
            "synth": asdict(self.scenario),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }
        return doc

    def write_manifest(self, path: str | Path, command: str, extra: dict | None = None) -> None:
        doc = {"command": command, **self.to_manifest()}
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _collect(path: str | Path | None, overrides: list[str] | None) -> dict[str, dict[str, str]]:
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            raw[section] = dict(parser.items(section))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        raw.setdefault(section.strip(), {})[key.strip()] = value.strip()
    return raw


def _build_preprocess(values: dict) -> PreprocessConfig:
    base = PreprocessConfig()
    spline = SplineConfig(
        smoothing_p=values.pop("spline_smoothing_p", base.spline.smoothing_p),
        window_s=values.pop("spline_window_s", base.spline.window_s),
        std_thresh=values.pop("spline_std_thresh", base.spline.std_thresh),
        amp_thresh=values.pop("spline_amp_thresh", base.spline.amp_thresh),
    )
    ppf = (
        values.pop("ppf_low", base.ppf[0]),
        values.pop("ppf_high", base.ppf[1]),
    )
    table = values.pop("extinction_table", None)
    extinction = load_extinction_table(table) if table else base.extinction
    return PreprocessConfig(spline=spline, ppf=ppf, extinction=extinction, **values)


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Parse config file + `section.key=value` overrides into a RunConfig."""
    raw = _collect(path, overrides)
    unknown_sections = set(raw) - set(_SECTION_PARSERS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    typed: dict[str, dict] = {}
    for section, items in raw.items():
        parsers = _SECTION_PARSERS[section]
        unknown = set(items) - set(parsers)
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        typed[section] = {}
        for key, text in items.items():
            try:
                typed[section][key] = parsers[key](text)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    try:
        cfg = RunConfig(
            data=DataConfig(**typed.get("data", {})),
            preprocess=_build_preprocess(dict(typed.get("preprocess", {}))),
            scenario=ScenarioConfig(**typed.get("synth", {})),
            model=ModelKnobs(**typed.get("model", {})),
            train=TrainConfig(**typed.get("train", {})),
            eval=EvalConfig(**typed.get("eval", {})),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if seed is not None:
        cfg.seed = seed
    else:
        cfg.seed = cfg.scenario.seed
    return cfg
