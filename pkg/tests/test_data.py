import json

import numpy as np
import pytest

from nirskill.data import (
    Channel,
    DatasetManifest,
    ManifestRecord,
    Montage,
    TrialRecording,
    apply_exclusions,
    builtin_montage_path,
    intensity_column_names,
    load_manifest,
    load_montage,
    read_trial_csv,
    select_region,
    write_trial_csv,
)


def make_trial(montage, tau=40, value=1.0, **meta):
    chans = tuple(c.id for c in montage.long_channels)
    raw = np.full((tau, 2 * len(chans)), value)
    defaults = dict(subject_id="S1", task="custom", day=1, trial_index=1, label=0)
    defaults.update(meta)
    return TrialRecording(channels=chans, raw=raw, **defaults)


class TestMontage:
    def test_builtin_1010(self, montage_1010):
        assert montage_1010.n_long == 46
        assert sum(1 for c in montage_1010.channels if c.kind == "short") == 8
        assert montage_1010.sample_rate_hz == 5.0863
        assert sorted(montage_1010.wavelengths_nm) == [760.0, 850.0]
        assert len(montage_1010.regions()) == 8

    def test_builtin_custom(self, custom_montage):
        assert custom_montage.n_long == 28
        assert len(custom_montage.regions()) == 5

    def test_duplicate_ids_rejected(self):
        ch = Channel("S1-D1", "S1", "D1", 3.0, "LPFC", "long")
        with pytest.raises(ValueError, match="unique"):
            Montage((760.0, 850.0), 5.0, (ch, ch))

    def test_two_distinct_wavelengths(self):
        ch = Channel("S1-D1", "S1", "D1", 3.0, "LPFC", "long")
        with pytest.raises(ValueError):
            Montage((760.0, 760.0), 5.0, (ch,))

    def test_separation_ranges(self):
        with pytest.raises(ValueError):
            Channel("a", "s", "d", 1.7, "LPFC", "long")
        with pytest.raises(ValueError):
            Channel("a", "s", "d", 1.7, "LPFC", "short")


class TestSelectRegion:
    def test_rpfc_has_12_columns(self, montage_1010):
        # column count derived from the shipped montage file
        n_rpfc = len(montage_1010.region_channels("RPFC"))
        trial = make_trial(montage_1010)
        out = select_region(trial, montage_1010, "RPFC")
        assert out.raw.shape[1] == 2 * n_rpfc == 12

    def test_identity_projection(self, custom_montage):
        trial = make_trial(custom_montage)
        out = select_region(trial, custom_montage, None)
        assert out.channels == trial.channels
        assert np.array_equal(out.raw, trial.raw)

    def test_regions_partition_custom_columns(self, custom_montage):
        # 5 regions, 28 long channels -> region columns partition 56 columns
        trial = make_trial(custom_montage)
        trial_cols = intensity_column_names(trial.channels)
        seen: list[str] = []
        for region in custom_montage.regions():
            out = select_region(trial, custom_montage, region)
            seen += intensity_column_names(out.channels)
        assert len(seen) == len(set(seen)) == 56
        assert sorted(seen) == sorted(trial_cols)

    def test_unknown_region(self, custom_montage):
        trial = make_trial(custom_montage)
        with pytest.raises(ValueError):
            select_region(trial, custom_montage, "LSMC")

    def test_column_mismatch(self, custom_montage):
        trial = make_trial(custom_montage)
        clipped = TrialRecording(
            subject_id="S1", task="custom", day=1, trial_index=1, label=0,
            channels=trial.channels[:10], raw=trial.raw[:, :20],
        )
        with pytest.raises(ValueError, match="cover"):
            select_region(clipped, custom_montage, "LPFC")

    def test_wavelength_order_within_channel(self, custom_montage):
        trial = make_trial(custom_montage)
        trial.raw[:, 0] = 2.0  # first channel @760
        trial.raw[:, 1] = 3.0  # first channel @850
        out = select_region(trial, custom_montage, "LPFC")
        assert np.all(out.raw[:, 0] == 2.0) and np.all(out.raw[:, 1] == 3.0)


class TestTrialRecording:
    def test_positive_intensities_required(self, custom_montage):
        with pytest.raises(ValueError, match="positive"):
            make_trial(custom_montage, value=0.0)

    def test_column_count_invariant(self, custom_montage):
        chans = tuple(c.id for c in custom_montage.long_channels)
        with pytest.raises(ValueError):
            TrialRecording(
                subject_id="S1", task="custom", day=1, trial_index=1, label=0,
                channels=chans, raw=np.ones((10, 3)),
            )


def write_manifest(tmp_path, records, max_duration_s=100.0, montage="montage.json"):
    import shutil

    shutil.copyfile(builtin_montage_path("custom"), tmp_path / "montage.json")
    doc = {"montage": montage, "max_duration_s": max_duration_s, "records": records}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def record(subject="S1", day=1, trial=1, duration=60.0, path="t.csv", **extra):
    rec = {
        "subject": subject, "task": "custom", "day": day, "trial": trial,
        "label": 1, "duration_s": duration, "path": path,
    }
    rec.update(extra)
    return rec


@pytest.fixture
def trial_file(tmp_path):
    path = tmp_path / "t.csv"
    write_trial_csv(path, np.arange(3) / 5.0, np.ones((3, 2)), ["S1-D1@760", "S1-D1@850"])
    return path


class TestLoadManifest:
    def test_well_formed(self, tmp_path, trial_file):
        path = write_manifest(tmp_path, [record(trial=i) for i in (1, 2, 3)])
        m = load_manifest(path)
        assert len(m.records) == 3

    def test_duplicate_key_rejected(self, tmp_path, trial_file):
        path = write_manifest(tmp_path, [record(day=1, trial=2), record(day=1, trial=2)])
        with pytest.raises(ValueError, match="duplicate"):
            load_manifest(path)

    def test_fls_s_composition_preserved(self, tmp_path, trial_file):
        # manifest mimicking the suturing dataset class counts
        records = [
            record(subject=f"P{i // 64}", day=(i % 64) // 8 + 1, trial=i % 8 + 1,
                   label=1 if i < 1207 else 0)
            for i in range(1207 + 236)
        ]
        for i, r in enumerate(records):
            r["label"] = 1 if i < 1207 else 0
        path = write_manifest(tmp_path, records)
        m = load_manifest(path)
        assert m.label_counts() == (1207, 236)

    def test_missing_field(self, tmp_path, trial_file):
        rec = record()
        del rec["duration_s"]
        path = write_manifest(tmp_path, [rec])
        with pytest.raises(ValueError, match="missing"):
            load_manifest(path)

    def test_dangling_path(self, tmp_path, trial_file):
        path = write_manifest(tmp_path, [record(path="nope.csv")])
        with pytest.raises(ValueError, match="not found"):
            load_manifest(path)

    def test_parse_error(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(ValueError):
            load_manifest(path)


class TestApplyExclusions:
    def manifest(self, tmp_path, trial_file, records):
        return load_manifest(write_manifest(tmp_path, records))

    def test_min_length_rule(self, tmp_path, trial_file):
        # 16 downsampled points: duration just under 17 * 8 / fs
        short = 16 * 8 / 5.0863
        m = self.manifest(tmp_path, trial_file, [record(duration=short)])
        kept, dropped = apply_exclusions(m)
        assert not kept.records and dropped[0][1] == "min-length"

    def test_zero_score_rule(self, tmp_path, trial_file):
        m = self.manifest(tmp_path, trial_file, [record(fls_score=0.0)])
        kept, dropped = apply_exclusions(m)
        assert dropped[0][1] == "zero-score"

    def test_over_duration_rule(self, tmp_path, trial_file):
        m = self.manifest(tmp_path, trial_file, [record(duration=150.0)])
        kept, dropped = apply_exclusions(m)
        assert dropped[0][1] == "over-max-duration"

    def test_duration_outlier_rule(self, tmp_path, trial_file):
        m = self.manifest(
            tmp_path, trial_file, [record(duration=80.0, logged_duration_s=60.0)]
        )
        kept, dropped = apply_exclusions(m)
        assert dropped[0][1] == "duration-outlier"
        m2 = self.manifest(
            tmp_path, trial_file, [record(duration=63.0, logged_duration_s=60.0)]
        )
        kept2, dropped2 = apply_exclusions(m2)
        assert kept2.records and not dropped2

    def test_clean_trial_kept_unchanged(self, tmp_path, trial_file):
        m = self.manifest(tmp_path, trial_file, [record(duration=60.0, fls_score=12.0)])
        kept, dropped = apply_exclusions(m)
        assert kept.records == m.records and not dropped

    def test_idempotent_and_partition(self, tmp_path, trial_file):
        records = [
            record(trial=1, duration=60.0),
            record(trial=2, duration=16 * 8 / 5.0863),
            record(trial=3, fls_score=0.0),
            record(trial=4, duration=150.0),
        ]
        m = self.manifest(tmp_path, trial_file, records)
        kept, dropped = apply_exclusions(m)
        assert len(kept.records) + len(dropped) == len(m.records)
        kept_keys = {r.key() for r in kept.records}
        drop_keys = {r.key() for r, _ in dropped}
        assert kept_keys.isdisjoint(drop_keys)
        assert kept_keys | drop_keys == {r.key() for r in m.records}
        kept2, dropped2 = apply_exclusions(kept)
        assert kept2.records == kept.records and not dropped2


class TestTrialCsv:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.uniform(0.5, 2.0, size=(20, 4))
        cols = ["A@760", "A@850", "B@760", "B@850"]
        path = tmp_path / "x.csv"
        write_trial_csv(path, np.arange(20) / 5.0, values, cols)
        data, names = read_trial_csv(path, expected_columns=cols)
        assert names == cols
        assert np.allclose(data, values, rtol=1e-9)

    def test_header_validation(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("time,A@760\n0,1\n")
        with pytest.raises(ValueError, match="t_s"):
            read_trial_csv(path)
