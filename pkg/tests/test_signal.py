import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from masa_tcn.signal import (DEAP_BANDS, MAHNOB_BANDS, BandSet, EegTrial, PreprocessConfig, SignalConfigError,
                             align_labels, average_reference, band_masks, build_feature_vector, build_sequences,
                             feature_index, feature_position, label_offset, rpsd, segment, sequence_count,
                             trial_features, trial_sequences, welch_psd)

MAHNOB = BandSet(MAHNOB_BANDS)
FS = 256.0


def trial_of(data, fs=FS, label=None, rate=None, tid="T0"):
    return EegTrial("S0", tid, fs, np.asarray(data, dtype=float), label, rate)


class TestBandSet:
    def test_presets(self):
        assert len(MAHNOB) == 6 and len(BandSet(DEAP_BANDS)) == 5

    @pytest.mark.parametrize("bands", [(), ((5, 3),), ((1, 5), (4, 8)), ((-1, 2),)])
    def test_invalid(self, bands):
        with pytest.raises(SignalConfigError):
            BandSet(bands)


class TestTrial:
    def test_label_length_tolerance_and_trim(self):
        x = np.zeros((2, 2560))
        assert trial_of(x, label=np.zeros(41), rate=4.0).label.size == 40
        assert trial_of(x, label=np.zeros(39), rate=4.0).label.size == 39
        with pytest.raises(ValueError):
            trial_of(x, label=np.zeros(42), rate=4.0)


class TestAverageReference:
    def test_two_channel_example(self):
        out = average_reference(trial_of([[1.0], [3.0]]))
        np.testing.assert_array_equal(out.data[:, 0], [-1.0, 1.0])

    def test_zero_mean_input_unchanged(self):
        x = np.array([[1.0, -2.0], [-1.0, 2.0]])
        np.testing.assert_array_equal(average_reference(trial_of(x)).data, x)

    def test_random_matrix_column_means(self, rng):
        out = average_reference(trial_of(rng.normal(size=(32, 1000))))
        assert np.abs(out.data.mean(axis=0)).max() < 1e-12

    def test_needs_two_channels(self):
        with pytest.raises(ValueError):
            average_reference(trial_of(np.zeros((1, 10))))


class TestSegment:
    def test_ten_second_trial(self, rng):
        x = rng.normal(size=(3, int(10 * FS)))
        segs = segment(trial_of(x), 2.0, 0.25)
        assert segs.shape == (33, 3, 512)
        np.testing.assert_array_equal(segs[5], x[:, 5 * 64: 5 * 64 + 512])

    def test_window_equal_trial_and_tiling(self, rng):
        x = rng.normal(size=(2, 512))
        assert segment(trial_of(x), 2.0, 0.25).shape[0] == 1
        tiles = segment(trial_of(rng.normal(size=(2, 2048))), 2.0, 2.0)
        assert tiles.shape[0] == 4

    def test_errors(self):
        with pytest.raises(ValueError):
            segment(trial_of(np.zeros((2, 100))), 2.0, 0.25)
        with pytest.raises(SignalConfigError):
            segment(trial_of(np.zeros((2, 1000))), 2.0, 0.001)

    @given(st.integers(512, 3000), st.sampled_from([0.25, 0.5, 1.0, 2.0]))
    def test_count_formula(self, n, step):
        x = np.zeros((1, n))
        assert segment(trial_of(x), 2.0, step).shape[0] == int(np.floor((n / FS - 2.0) / step)) + 1


class TestWelch:
    def test_sinusoid_peak_at_nearest_bin(self):
        t = np.arange(512) / FS
        freqs, psd = welch_psd(np.sin(2 * np.pi * 10 * t)[None], FS)
        fft_freqs = np.fft.rfftfreq(256, 1 / FS)
        assert freqs[psd[0].argmax()] == fft_freqs[np.abs(fft_freqs - 10).argmin()]

    def test_parseval_over_white_noise(self):
        r = np.random.default_rng(0)
        ratios = []
        for _ in range(100):
            sigma = r.uniform(0.5, 3.0)
            x = r.normal(scale=sigma, size=(1, 512))
            freqs, psd = welch_psd(x, FS)
            ratios.append(np.trapezoid(psd[0], freqs) / sigma ** 2)
        assert abs(np.mean(ratios) - 1.0) < 0.1

    def test_zero_input(self):
        _, psd = welch_psd(np.zeros((2, 512)), FS)
        assert not psd.any()

    @given(st.floats(0.01, 100))
    def test_scaling_is_quadratic(self, a):
        x = np.random.default_rng(3).normal(size=(2, 512))
        _, p1 = welch_psd(x, FS)
        _, p2 = welch_psd(a * x, FS)
        np.testing.assert_allclose(p2, a * a * p1, rtol=1e-10, atol=1e-300)

    def test_window_longer_than_segment(self):
        with pytest.raises(ValueError):
            welch_psd(np.zeros((1, 100)), FS)


class TestRpsd:
    def test_sinusoid_mass_in_alpha(self):
        t = np.arange(512) / FS
        freqs, psd = welch_psd(np.sin(2 * np.pi * 10 * t)[None], FS)
        assert rpsd(psd, freqs, MAHNOB, FS)[0, 2] > 0.95

    def test_equal_band_power(self):
        freqs = np.arange(0, 129, dtype=float)
        rel = rpsd(np.ones((1, freqs.size)), freqs, MAHNOB, FS)
        np.testing.assert_allclose(rel, 1 / 6, rtol=1e-12)

    @given(arrays(np.float64, (3, 129), elements=st.floats(0, 1e3)))
    def test_rows_sum_to_one(self, psd):
        rel = rpsd(psd, np.arange(129, dtype=float), MAHNOB, FS)
        np.testing.assert_allclose(rel.sum(axis=1), 1.0, atol=1e-9)
        assert (rel >= 0).all() and (rel <= 1).all()

    def test_empty_band_named(self):
        freqs = np.arange(0, 129, 1.0)
        with pytest.raises(SignalConfigError, match="0.2, 0.4"):
            band_masks(freqs, BandSet(((0.2, 0.4),)))
        with pytest.raises(SignalConfigError, match="Nyquist"):
            band_masks(freqs, BandSet(((100, 200),)), FS)


class TestFeatureLayout:
    def test_length(self):
        assert build_feature_vector(np.zeros((32, 6))).shape == (192,)
        np.testing.assert_array_equal(build_feature_vector(np.arange(6.0)[None]), np.arange(6.0))

    def test_index_map_exhaustive(self):
        rel = np.arange(32 * 6, dtype=float).reshape(32, 6)
        v = build_feature_vector(rel)
        seen = set()
        for c in range(32):
            for b in range(6):
                i = feature_index(c, b, 6)
                assert i == c * 6 + b and feature_position(i, 6) == (c, b)
                assert v[i] == rel[c, b]
                seen.add(i)
        assert seen == set(range(192))


class TestSequences:
    def test_counts(self):
        assert sequence_count(239, 96, 32) == 5
        seqs = build_sequences(np.zeros((239, 4)), np.arange(239.0), 96, 32, 4.0, 4.0)
        assert len(seqs) == 5
        assert len(build_sequences(np.zeros((96, 4)), 1, 96, 32)) == 1

    def test_label_slice_matches_feature_indices(self, rng):
        v = rng.normal(size=(150, 3))
        lab = np.arange(150.0)
        for s in build_sequences(v, lab, 40, 16, 4.0, 4.0):
            np.testing.assert_array_equal(s.label, lab[s.start:s.start + 40])
            np.testing.assert_array_equal(s.matrix, v[s.start:s.start + 40].T)

    def test_rate_mismatch(self):
        with pytest.raises(ValueError, match="rate"):
            build_sequences(np.zeros((100, 2)), np.zeros(100), 10, 5, 4.0, 2.0)
        with pytest.raises(ValueError, match="rate"):
            build_sequences(np.zeros((100, 2)), np.zeros(50), 10, 5)

    def test_discrete_label_shared(self):
        assert {s.label for s in build_sequences(np.zeros((60, 2)), 1, 25, 16)} == {1}


class TestPipeline:
    def test_feature_rate_is_four_hertz(self, rng):
        x = rng.normal(size=(2, int(12 * FS)))
        assert trial_features(trial_of(x), PreprocessConfig()).shape[0] == (12 - 2) * 4 + 1

    def test_label_offset_is_last_covered_bin(self):
        assert label_offset(PreprocessConfig(), 4.0) == 7
        assert label_offset(PreprocessConfig(label_offset=0), 4.0) == 0

    def test_alignment_trims(self):
        v, y = align_labels(np.zeros((233, 2)), np.arange(240.0), 7)
        assert len(v) == len(y) == 233 and y[0] == 7 and y[-1] == 239

    def test_mahnob_geometry(self, rng):
        x = rng.normal(size=(32, int(60 * FS)))
        tr = trial_of(x, label=np.linspace(-1, 1, 240), rate=4.0)
        seqs = trial_sequences(tr, PreprocessConfig())
        assert len(seqs) == 5
        for s in seqs:
            assert s.matrix.shape == (192, 96)
            np.testing.assert_allclose(s.matrix.sum(axis=0), 32.0, atol=1e-9)
            assert s.matrix.min() >= 0 and s.matrix.max() <= 1

    def test_deap_geometry(self, rng):
        tr = trial_of(rng.normal(size=(32, int(60 * FS))), label=1)
        seqs = trial_sequences(tr, PreprocessConfig.deap())
        assert seqs[0].matrix.shape == (160, 25)
        assert seqs[1].start - seqs[0].start == 16      # 4 s step at 4 Hz

    def test_pure(self, rng):
        tr = trial_of(rng.normal(size=(4, 4000)), label=np.zeros(62), rate=4.0)
        a = trial_sequences(tr, PreprocessConfig(seq_len=20, seq_step=8))
        b = trial_sequences(tr, PreprocessConfig(seq_len=20, seq_step=8))
        assert all(np.array_equal(p.matrix, q.matrix) for p, q in zip(a, b))

    def test_config_round_trip(self):
        cfg = PreprocessConfig.deap(window_s=1.0)
        assert PreprocessConfig.from_dict(cfg.to_dict()) == cfg
