"""Feature extraction against the independent reference pipeline."""

import numpy as np
import pytest

from oracles import mfcc96_reference
from qdsound import features as F
from qdsound.render import SoundBuffer


def _buf(x):
    return SoundBuffer(np.asarray(x, dtype=np.float64), 16000, len(x) / 16000)


def _tone(freq, n=64000, amp=0.5, phase=0.0):
    return amp * np.sin(2.0 * np.pi * freq * np.arange(n) / 16000 + phase)


class TestMfcc96:
    def test_frame_count_and_length(self):
        x = _tone(440.0)
        mag = F.stft_magnitude(x)
        assert mag.shape[0] == 398
        vec = F.extract_mfcc96(_buf(x))
        assert vec.shape == (96,)
        assert np.all(np.isfinite(vec))

    def test_insufficient_frames(self):
        with pytest.raises(ValueError, match="insufficient frames"):
            F.extract_mfcc96(_buf(np.zeros(399)))

    def test_dc_buffer_has_zero_deltas(self):
        vec = F.extract_mfcc96(_buf(np.full(16000, 0.25)))
        assert np.all(vec[48:] == 0.0)

    def test_matches_reference_pipeline(self):
        rng = np.random.default_rng(5)
        signals = [
            _tone(440.0, 16000),
            _tone(97.0, 16000, amp=0.9),
            rng.uniform(-1, 1, 16000),
            np.clip(_tone(440.0, 16000) + rng.normal(0, 0.1, 16000), -1, 1),
        ]
        for x in signals:
            mine = F.extract_mfcc96(_buf(x))
            ref = mfcc96_reference(x)
            assert np.max(np.abs(mine - ref)) < 1e-6

    def test_pure_and_deterministic(self):
        x = _tone(220.0, 16000)
        assert np.array_equal(F.extract_mfcc96(_buf(x)), F.extract_mfcc96(_buf(x)))

    def test_min_mean_max_ordering(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            x = rng.uniform(-1, 1, 8000)
            vec = F.extract_mfcc96(_buf(x)).reshape(24, 4)
            mean, _, lo, hi = vec.T
            assert np.all(lo <= mean + 1e-12)
            assert np.all(mean <= hi + 1e-12)

    def test_wrong_rate_rejected(self):
        buf = SoundBuffer(np.zeros(48000), 48000, 1.0)
        with pytest.raises(ValueError, match="16000"):
            F.extract_mfcc96(buf)

    def test_period_shift_robustness(self):
        # exactly periodic tones: rolling by one period changes nothing
        # that the statistics can see
        for freq, phase in [(200.0, 0.0), (160.0, 1.0), (500.0, 0.3)]:
            x = _tone(freq, 32000, phase=phase)
            period = int(16000 / freq)
            shifted = np.roll(x, period)
            a = F.extract_mfcc96(_buf(x))
            b = F.extract_mfcc96(_buf(shifted))
            assert np.linalg.norm(a - b) < 1e-3


class TestSpectral:
    def test_sine_centroid(self):
        feats = F.extract_spectral(_buf(_tone(1000.0, 16000)))
        assert abs(feats.centroid - 1000.0) <= 40.0  # one bin

    def test_white_noise_flatness(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            feats = F.extract_spectral(_buf(rng.uniform(-1, 1, 8000)))
            assert feats.flatness > 0.5

    def test_silence_conventions(self):
        feats = F.extract_spectral(_buf(np.zeros(16000)))
        assert feats.centroid == 0.0
        assert feats.flatness == 1.0
        assert feats.slope == 0.0
        assert feats.rolloff == 0.0

    def test_invariants(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = np.clip(rng.normal(0, 0.4, 8000), -1, 1)
            feats = F.extract_spectral(_buf(x))
            arr = feats.as_array()
            assert np.all(np.isfinite(arr))
            assert 0.0 <= feats.flatness <= 1.0
            assert 0.0 <= feats.rolloff <= 8000.0

    def test_extract_all_consistent(self):
        x = _tone(330.0, 16000)
        vec, feats = F.extract_all(_buf(x))
        assert np.array_equal(vec, F.extract_mfcc96(_buf(x)))
        assert feats == F.extract_spectral(_buf(x))


class TestNorm:
    def test_identical_vectors_normalize_to_zero(self):
        pop = np.tile(np.arange(96, dtype=np.float64), (10, 1))
        stats = F.fit_norm(pop)
        assert np.all(stats.floored)
        z = F.apply_norm(pop[0], stats)
        assert np.max(np.abs(z)) < 1e-5

    def test_two_point_population(self):
        pop = np.stack([np.zeros(96), np.full(96, 2.0)])
        stats = F.fit_norm(pop)
        assert np.allclose(F.apply_norm(pop[0], stats), -1.0)
        assert np.allclose(F.apply_norm(pop[1], stats), 1.0)

    def test_population_statistics(self):
        rng = np.random.default_rng(8)
        pop = rng.normal(3.0, 2.5, (1000, 96))
        stats = F.fit_norm(pop)
        z = F.apply_norm(pop, stats)
        assert np.max(np.abs(z.mean(axis=0))) < 1e-9
        assert np.max(np.abs(z.std(axis=0) - 1.0)) < 1e-9
        assert not np.any(stats.floored)

    def test_stats_roundtrip(self):
        stats = F.fit_norm(np.random.default_rng(1).normal(0, 1, (20, 96)))
        back = F.NormStats.from_dict(stats.to_dict())
        assert np.array_equal(back.mean, stats.mean)
        assert np.array_equal(back.std, stats.std)


class TestStoreFiles:
    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        vecs = rng.normal(0, 1, (5, 96))
        ids = [f"s{i}" for i in range(5)]
        path = tmp_path / "feats.csv"
        F.write_features_csv(path, ids, vecs)
        rids, mat, cols = F.read_features_csv(path)
        assert rids == ids
        assert len(cols) == 96
        assert np.array_equal(mat, vecs)  # repr round-trips float64 exactly

    def test_bin_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        vecs = rng.normal(0, 1, (7, 96))
        ids = [f"s{i}" for i in range(7)]
        path = tmp_path / "feats.bin"
        F.write_features_bin(path, ids, vecs)
        rids, mat = F.read_features_bin(path)
        assert rids == ids
        assert np.array_equal(mat, vecs)

    def test_bin_truncation_detected(self, tmp_path):
        path = tmp_path / "feats.bin"
        F.write_features_bin(path, ["a"], np.ones((1, 96)))
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            F.read_features_bin(path)
