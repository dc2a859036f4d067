"""Generate a small labeled synthetic fNIRS dataset and inspect it.

The forward model writes raw-intensity trial CSVs, ground-truth chromophore
files and a manifest. Everything derives from one master seed, so rerunning
this script reproduces the same bytes.
"""

import tempfile
from pathlib import Path

import numpy as np

from nirskill.data import apply_exclusions, load_manifest
from nirskill.synth import ScenarioConfig, generate_dataset

out = Path(tempfile.mkdtemp(prefix="nirskill_demo_"))
scenario = ScenarioConfig(
    seed=21,
    n_subjects=4,
    days=2,
    trials_per_day=6,
    duration_min_s=45.0,
    duration_max_s=70.0,
    positive_fraction=0.75,
)

manifest = generate_dataset(scenario, out)
pos, neg = manifest.label_counts()
print(f"dataset written under {out}")
print(f"trials: {len(manifest.records)}  positive (unsuccessful): {pos}  negative: {neg}")
print(f"subjects: {manifest.subjects()}")

first = manifest.records[0]
print(f"\nfirst record: subject {first.subject}, day {first.day}, trial {first.trial}, "
      f"label {first.label}, {first.duration_s:.1f}s -> {first.path}")

# the exclusion rules leave a clean generated set untouched
kept, dropped = apply_exclusions(manifest)
print(f"\nexclusion pass: kept {len(kept.records)}, dropped {len(dropped)}")

# corrupt one duration to show the outlier rule firing
import dataclasses, json

doc = json.loads((out / "manifest.json").read_text())
doc["records"][0]["logged_duration_s"] = doc["records"][0]["duration_s"] * 1.4
(out / "manifest_outlier.json").write_text(json.dumps(doc))
kept2, dropped2 = apply_exclusions(load_manifest(out / "manifest_outlier.json"))
print("after tampering with one acquisition log entry:")
for rec, reason in dropped2:
    print(f"  dropped ({rec.subject}, day {rec.day}, trial {rec.trial}): {reason}")
