import numpy as np
import pytest

from nirskill.data import Channel
from nirskill.preprocess import (
    NormalizationStats,
    PreprocessConfig,
    SplineConfig,
    apply_norm,
    bandpass,
    beer_lambert_matrix,
    detect_motion_segments,
    downsample,
    fit_norm,
    intensity_to_od,
    load_extinction_table,
    mbll,
    preprocess_full,
    preprocess_raw,
    spline_correct,
)
from nirskill.synth import ScenarioConfig, simulate_trial, subject_params, trial_rng

FS = 5.0863


@pytest.fixture(scope="module")
def cfg():
    return PreprocessConfig()


def fft_amplitude_ratio(cfg, freq, duration_s=4000.0):
    """Steady-state gain oracle: RMS ratio over the middle half of a long
    sinusoid, away from filter transients."""
    n = int(duration_s * FS)
    t = np.arange(n) / FS
    x = np.sin(2 * np.pi * freq * t)[:, None]
    y = bandpass(x, FS, cfg)
    mid = slice(n // 4, 3 * n // 4)
    return float(np.sqrt(np.mean(y[mid] ** 2) / np.mean(x[mid] ** 2)))


class TestIntensityToOd:
    def test_constant_column_zero(self):
        od = intensity_to_od(np.full((30, 4), 7.0))
        assert np.abs(od.values).max() == 0.0
        assert np.allclose(od.reference_mean, 7.0)

    def test_half_mean_gives_log10_2(self):
        # one sample at 0.5x mean: od = log10(2) at that sample
        raw = np.full((10, 1), 2.0)
        raw[3, 0] = 1.0
        mean = raw.mean()
        od = intensity_to_od(raw)
        assert abs(od.values[3, 0] - np.log10(mean / 1.0)) < 1e-12

    def test_nonpositive_rejected_with_location(self):
        raw = np.ones((5, 3))
        raw[2, 1] = 0.0
        with pytest.raises(ValueError, match="row 2, column 1"):
            intensity_to_od(raw)

    def test_global_scaling_invariance(self):
        rng = np.random.default_rng(0)
        raw = rng.uniform(0.5, 2.0, size=(50, 3))
        a = intensity_to_od(raw).values
        b = intensity_to_od(17.3 * raw).values
        assert np.abs(a - b).max() < 1e-12


class TestBandpass:
    def test_dc_rejected(self, cfg):
        y = bandpass(np.full((2000, 2), 5.0), FS, cfg)
        assert np.abs(y[100:-100]).max() < 1e-3

    def test_passband_gain(self, cfg):
        g = fft_amplitude_ratio(cfg, 0.05)
        assert 0.89 <= g <= 1.0

    def test_stopband_attenuation(self, cfg):
        g = fft_amplitude_ratio(cfg, 1.0)
        assert g <= 0.1  # >= 20 dB down

    def test_linearity(self, cfg):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(300, 2))
        y = rng.normal(size=(300, 2))
        a, b = 1.7, -0.4
        lhs = bandpass(a * x + b * y, FS, cfg)
        rhs = a * bandpass(x, FS, cfg) + b * bandpass(y, FS, cfg)
        assert np.abs(lhs - rhs).max() < 1e-9  # SOS keeps roundoff ~1e-13

    def test_zero_phase_preserves_peak(self, cfg):
        n = 1200
        t = np.arange(n)
        pulse = np.exp(-0.5 * ((t - 600) / 40.0) ** 2)[:, None]
        y = bandpass(pulse, FS, cfg)
        assert abs(int(np.argmax(y[:, 0])) - 600) <= 1

    def test_too_short_rejected(self, cfg):
        with pytest.raises(ValueError, match="too short"):
            bandpass(np.ones((20, 1)), FS, cfg)


class TestMotionDetection:
    def test_clean_signal_no_segments(self, cfg):
        rng = np.random.default_rng(0)
        t = np.arange(600) / FS
        od = 1e-4 * np.sin(2 * np.pi * 0.05 * t)[:, None] + 1e-6 * rng.normal(size=(600, 1))
        assert detect_motion_segments(od, FS, cfg.spline) == []

    def test_step_artifact_flagged(self, cfg):
        rng = np.random.default_rng(1)
        od = 1e-4 * rng.normal(size=(400, 2))
        sd = od[:, 0].std()
        od[100:, 0] += 10 * sd
        segments = detect_motion_segments(od, FS, cfg.spline)
        assert any(beg <= 100 < end for beg, end in segments)

    def test_nearby_spikes_merge(self, cfg):
        rng = np.random.default_rng(2)
        od = 1e-5 * rng.normal(size=(400, 1))
        od[200, 0] += 0.5
        od[200 + round(1.0 * FS), 0] += 0.5  # 1 s apart, window 2 s
        segments = detect_motion_segments(od, FS, cfg.spline)
        assert len(segments) == 1


class TestSplineCorrect:
    def test_empty_segments_bitwise_identity(self):
        rng = np.random.default_rng(0)
        od = rng.normal(size=(100, 3))
        out = spline_correct(od, [])
        assert np.array_equal(out, od)

    def test_unflagged_samples_untouched(self):
        rng = np.random.default_rng(1)
        od = rng.normal(size=(200, 2))
        out = spline_correct(od, [(50, 90)])
        changed = out != od
        assert not changed[:50].any() and not changed[90:].any()

    def test_step_artifact_releveled(self, cfg):
        rng = np.random.default_rng(2)
        t = np.arange(500) / FS
        clean = 0.01 * np.sin(2 * np.pi * 0.05 * t) + 5e-4 * rng.normal(size=500)
        dirty = clean.copy()
        dirty[250:260] += np.linspace(0, 0.5, 10)  # rising edge
        dirty[260:] += 0.5
        seg = (245, 265)
        out = spline_correct(dirty[:, None], [seg], cfg.spline)[:, 0]
        left_jump = abs(out[seg[0]] - out[seg[0] - 1])
        right_jump = abs(out[seg[1]] - out[seg[1] - 1])
        assert left_jump < 0.05 and right_jump < 0.05

    def test_tiny_segment_skipped_with_warning(self):
        od = np.random.default_rng(3).normal(size=(50, 1))
        with pytest.warns(UserWarning, match="shorter than 4"):
            out = spline_correct(od, [(10, 12)])
        assert np.array_equal(out, od)

    def test_out_of_bounds_segment(self):
        with pytest.raises(ValueError):
            spline_correct(np.zeros((10, 1)), [(5, 20)])


def region_channels(n=2):
    return [Channel(f"S{i}-D{i}", f"S{i}", f"D{i}", 3.0, "LPFC", "long") for i in range(n)]


class TestMbll:
    def test_zero_od_zero_concentration(self, cfg):
        conc = mbll(np.zeros((10, 4)), cfg, region_channels(2))
        assert np.abs(conc).max() == 0.0

    def test_identity_system(self, cfg):
        # with A = I the OD pair passes through (scaled to umol/L)
        chans = region_channels(1)
        ident = PreprocessConfig(
            ppf=(1.0, 1.0),
            extinction=((760.0, 1.0, 0.0), (850.0, 0.0, 1.0)),
        )
        od = np.tile([[0.3, 0.7]], (5, 1))
        conc = mbll(od, ident, [Channel("a", "s", "d", 1.0, "LPFC", "short")])
        # separation 1 cm, ppf 1 -> A = I; output in umol/L
        assert np.allclose(conc, 1e6 * od)

    def test_forward_inverse_roundtrip(self, cfg):
        rng = np.random.default_rng(0)
        chans = region_channels(3)
        conc_um = rng.normal(size=(40, 6))
        od = np.empty_like(conc_um)
        for i, ch in enumerate(chans):
            a = beer_lambert_matrix(cfg, (760.0, 850.0), ch.separation_cm)
            od[:, 2 * i : 2 * i + 2] = 1e-6 * conc_um[:, 2 * i : 2 * i + 2] @ a.T
        back = mbll(od, cfg, chans)
        rel = np.abs(back - conc_um).max() / np.abs(conc_um).max()
        assert rel < 1e-9

    def test_singular_system_rejected(self):
        with pytest.raises(ValueError, match="singular"):
            PreprocessConfig(extinction=((760.0, 1.0, 2.0), (850.0, 2.0, 4.0)))

    def test_column_count_checked(self, cfg):
        with pytest.raises(ValueError, match="columns"):
            mbll(np.zeros((5, 3)), cfg, region_channels(2))


class TestDownsample:
    def test_factor_one_identity(self):
        x = np.random.default_rng(0).normal(size=(40, 2))
        assert np.array_equal(downsample(x, 1), x)

    def test_rate_arithmetic(self):
        # factor 8 at 5.0863 Hz -> 0.6358 Hz; length ceil(n / 8)
        n = 403
        x = np.zeros((n, 1))
        y = downsample(x, 8)
        assert y.shape[0] == int(np.ceil(n / 8))
        assert abs(FS / 8 - 0.6357875) < 1e-6

    def test_constant_preserved(self):
        x = np.full((200, 3), 2.5)
        y = downsample(x, 8)
        assert np.abs(y - 2.5).max() < 1e-12

    def test_antialias(self):
        # a tone above the post-decimation Nyquist must be strongly attenuated
        t = np.arange(4000) / FS
        x = np.sin(2 * np.pi * 1.5 * t)[:, None]
        y = downsample(x, 8)
        assert np.sqrt(np.mean(y[10:-10] ** 2)) < 0.05

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            downsample(np.zeros((10, 1)), 0)


class TestNormalization:
    def test_pooled_min_max(self):
        trials = [np.array([[2.0], [4.0]]), np.array([[6.0], [3.0]])]
        stats = fit_norm(trials)
        assert stats.col_min[0] == 2.0 and stats.col_max[0] == 6.0

    def test_degenerate_column_scale_one(self):
        stats = fit_norm([np.full((4, 2), 5.0)])
        assert np.all(stats.scale == 1.0)
        out = apply_norm(np.full((3, 2), 5.0), stats)
        assert np.abs(out).max() == 0.0

    def test_train_values_in_unit_interval(self):
        rng = np.random.default_rng(0)
        trials = [rng.normal(size=(30, 4)) for _ in range(5)]
        stats = fit_norm(trials)
        for t in trials:
            y = apply_norm(t, stats)
            assert y.min() >= -1e-12 and y.max() <= 1 + 1e-12
        pooled = np.vstack([apply_norm(t, stats) for t in trials])
        assert np.abs(pooled.min(axis=0)).max() < 1e-12
        assert np.abs(pooled.max(axis=0) - 1).max() < 1e-12

    def test_formula_anchors(self):
        stats = NormalizationStats(col_min=np.array([2.0]), col_max=np.array([6.0]))
        assert apply_norm(np.array([[2.0]]), stats)[0, 0] == 0.0
        assert apply_norm(np.array([[6.0]]), stats)[0, 0] == 1.0
        assert apply_norm(np.array([[4.0]]), stats)[0, 0] == 0.5
        # test-time values may leave [0, 1]: no clipping
        assert apply_norm(np.array([[8.0]]), stats)[0, 0] == 1.5

    def test_empty_input(self):
        with pytest.raises(ValueError):
            fit_norm([])

    def test_column_mismatch(self):
        stats = fit_norm([np.zeros((3, 2))])
        with pytest.raises(ValueError):
            apply_norm(np.zeros((3, 3)), stats)


@pytest.fixture(scope="module")
def clean_scenario():
    return ScenarioConfig(
        cardiac_amp_um=0.0, resp_amp_um=0.0, mayer_amp_um=0.0,
        drift_od_per_s=0.0, white_sd_od=0.0, motion_rate_per_min=0.0,
        subject_sd=0.0, channel_gain_sd=0.0,
    )


class TestPipelines:
    def test_preprocess_raw_identity_region(self, custom_montage, cfg, clean_scenario):
        sp = subject_params(clean_scenario, custom_montage, 0)
        trial, _ = simulate_trial(
            1, sp, clean_scenario, custom_montage, trial_rng(1, 0, 1, 1)
        )
        full = preprocess_raw(trial, cfg, custom_montage, None)
        assert full.shape[1] == 2 * custom_montage.n_long

    def test_preprocess_raw_region_columns(self, custom_montage, cfg, clean_scenario):
        sp = subject_params(clean_scenario, custom_montage, 0)
        trial, _ = simulate_trial(
            1, sp, clean_scenario, custom_montage, trial_rng(1, 0, 1, 1)
        )
        out = preprocess_raw(trial, cfg, custom_montage, "RPFC")
        assert out.shape[1] == 2 * len(custom_montage.region_channels("RPFC"))

    def test_preprocess_raw_min_length_guard(self, custom_montage, cfg, clean_scenario):
        import dataclasses

        sp = subject_params(clean_scenario, custom_montage, 0)
        trial, _ = simulate_trial(
            1, sp, clean_scenario, custom_montage, trial_rng(1, 0, 1, 1)
        )
        short = dataclasses.replace(trial, raw=trial.raw[:100])  # 13 after /8
        with pytest.raises(ValueError, match="17"):
            preprocess_raw(short, cfg, custom_montage, None)

    def test_preprocess_raw_deterministic(self, custom_montage, cfg, clean_scenario):
        sp = subject_params(clean_scenario, custom_montage, 0)
        trial, _ = simulate_trial(
            1, sp, clean_scenario, custom_montage, trial_rng(1, 0, 1, 1)
        )
        a = preprocess_raw(trial, cfg, custom_montage, "RPFC")
        b = preprocess_raw(trial, cfg, custom_montage, "RPFC")
        assert np.array_equal(a, b)

    def test_preprocess_full_constant_intensity_zero(self, custom_montage, cfg):
        from nirskill.data import TrialRecording

        chans = tuple(c.id for c in custom_montage.long_channels)
        trial = TrialRecording(
            subject_id="S1", task="custom", day=1, trial_index=1, label=0,
            channels=chans, raw=np.full((400, 2 * len(chans)), 1.3),
        )
        conc = preprocess_full(trial, cfg, custom_montage, None)
        assert np.abs(conc).max() < 1e-9

    def test_preprocess_full_recovers_truth(self, custom_montage, cfg):
        # default-noise scenario without motion: r >= 0.9 per channel
        scn = ScenarioConfig(motion_rate_per_min=0.0)
        sp = subject_params(scn, custom_montage, 0)
        trial, truth = simulate_trial(
            1, sp, scn, custom_montage, trial_rng(scn.seed, 0, 1, 1)
        )
        rec = preprocess_full(trial, cfg, custom_montage, None)
        tds = downsample(truth.chromophores(), cfg.downsample_factor)
        cors = [np.corrcoef(rec[:, c], tds[:, c])[0, 1] for c in range(rec.shape[1])]
        assert min(cors) >= 0.9

    def test_preprocess_full_column_count(self, custom_montage, cfg, clean_scenario):
        sp = subject_params(clean_scenario, custom_montage, 0)
        trial, _ = simulate_trial(
            1, sp, clean_scenario, custom_montage, trial_rng(1, 0, 1, 1)
        )
        conc = preprocess_full(trial, cfg, custom_montage, "SMA")
        assert conc.shape[1] == 2 * len(custom_montage.region_channels("SMA"))


class TestExtinctionTable:
    def test_builtin_values(self):
        table = load_extinction_table()
        assert table[0][0] == 760.0 and table[1][0] == 850.0
        assert table[0][1] == 586.0 and table[1][2] == 691.32

    def test_matrix_nonsingular(self, cfg):
        a = beer_lambert_matrix(cfg, (760.0, 850.0), 3.0)
        assert abs(np.linalg.det(a)) > 1e-12
