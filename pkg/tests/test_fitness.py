"""Fitness regimes: reference similarity, multi-reference, reference-free."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import compressibility_reference
from qdsound import fitness as Q
from qdsound import refdb
from qdsound.features import NormStats


def _tone(freq, n=16000, amp=0.5):
    return amp * np.sin(2.0 * np.pi * freq * np.arange(n) / 16000)


def _store_from(vectors):
    vectors = np.asarray(vectors, dtype=np.float64)
    norm = NormStats(
        np.zeros(vectors.shape[1]),
        np.ones(vectors.shape[1]),
        np.zeros(vectors.shape[1], dtype=bool),
    )
    ids = [f"v{i}" for i in range(len(vectors))]
    return refdb.ReferenceStore(ids, ids, vectors, norm, refdb.build_index(vectors))


class TestSingleRef:
    def test_identical_vectors_score_one(self):
        v = np.arange(1.0, 97.0)
        assert Q.q_single_ref(v, v) == 1.0
        assert Q.q_single_ref(v, v, p=4.0) == 1.0

    def test_orthogonal_vectors_score_zero(self):
        a = np.zeros(96)
        b = np.zeros(96)
        a[0] = 1.0
        b[1] = 1.0
        assert Q.q_single_ref(a, b) == 0.0

    def test_power_curves_the_score(self):
        # cos distance 0.5 -> base 0.5 -> squared 0.25
        a = np.array([1.0, 0.0])
        b = np.array([np.cos(np.pi / 3), np.sin(np.pi / 3)])
        assert abs(Q.q_single_ref(a, b, p=2.0) - 0.25) < 1e-12

    def test_opposite_vectors_clamp_to_zero(self):
        v = np.ones(8)
        assert Q.q_single_ref(v, -v) == 0.0
        assert Q.q_single_ref(v, -v, p=3.0) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(0, 1, (2, 96))
        assert abs(Q.q_single_ref(a, b) - Q.q_single_ref(5.0 * a, 0.01 * b)) < 1e-12

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            Q.cosine_distance(np.zeros(4), np.ones(4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.5, 4.0))
    def test_bounded(self, seed, p):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(0, 1, (2, 16))
        q = Q.q_single_ref(a, b, p=p)
        assert 0.0 <= q <= 1.0


class TestMultiRef:
    def test_store_of_one_equals_single_ref(self):
        rng = np.random.default_rng(1)
        ref = rng.normal(0, 1, 96)
        store = _store_from(ref[None, :])
        for _ in range(20):
            v = rng.normal(0, 1, 96)
            for p in (1.0, 2.0):
                one = Q.q_multi_ref(v, store, k=1, p=p)
                single = Q.q_single_ref(v, ref, p=p)
                assert abs(one - single) < 1e-12

    def test_k_equals_store_size_is_exhaustive_mean(self):
        rng = np.random.default_rng(2)
        refs = rng.normal(0, 1, (10, 96))
        store = _store_from(refs)
        v = rng.normal(0, 1, 96)
        sims = [1.0 - Q.cosine_distance(v, r) for r in refs]
        want = max(float(np.mean(sims)), 0.0)
        assert abs(Q.q_multi_ref(v, store, k=10) - want) < 1e-12

    def test_matches_brute_force_at_small_k(self):
        rng = np.random.default_rng(3)
        refs = rng.normal(0, 1, (50, 96))
        store = _store_from(refs)
        for _ in range(10):
            v = rng.normal(0, 1, 96)
            dists = sorted(Q.cosine_distance(v, r) for r in refs)
            want = max(float(np.mean([1.0 - d for d in dists[:5]])), 0.0)
            assert abs(Q.q_multi_ref(v, store, k=5) - want) < 1e-12

    def test_zero_query_scores_zero(self):
        store = _store_from(np.eye(4))
        assert Q.q_multi_ref(np.zeros(4), store, k=2) == 0.0

    def test_k_beyond_store_rejected(self):
        store = _store_from(np.eye(4))
        with pytest.raises(ValueError):
            Q.q_multi_ref(np.ones(4), store, k=5)


class TestDetectors:
    def _props(self, x):
        return dict(zip(Q.PROBLEM_NAMES, Q.detect_problems(np.asarray(x)).as_array()))

    def test_clean_tone_fires_nothing(self):
        props = self._props(_tone(220.0, 64000))
        assert all(v == 0.0 for v in props.values())

    def test_clicks(self):
        x = _tone(220.0, 16000, amp=0.1)
        x[5000] = 0.9
        props = self._props(x)
        assert props["clicks"] > 0.0

    def test_gaps(self):
        x = _tone(220.0, 16000)
        x[6000:9000] = 0.0
        props = self._props(x)
        assert props["gaps"] > 0.0

    def test_all_silent_buffer_has_no_gaps(self):
        props = self._props(np.zeros(16000))
        assert props["gaps"] == 0.0

    def test_clipping_needs_three_consecutive(self):
        x = _tone(220.0, 16000, amp=0.2)
        x[8000:8003] = 1.0
        assert self._props(x)["clipping"] > 0.0
        y = _tone(220.0, 16000, amp=0.2)
        y[8000:8002] = 1.0
        assert self._props(y)["clipping"] == 0.0

    def test_noise_burst(self):
        rng = np.random.default_rng(0)
        x = 0.02 * _tone(110.0, 64000)
        x[20000:22048] = rng.uniform(-0.9, 0.9, 2048)
        props = self._props(np.clip(x, -1, 1))
        assert props["noise_bursts"] > 0.0

    def test_loud_tonal_attack_is_not_a_burst(self):
        x = 0.02 * _tone(110.0, 64000)
        x[20000:22048] = 0.9 * np.sin(2 * np.pi * 880 * np.arange(2048) / 16000)
        props = self._props(np.clip(x, -1, 1))
        assert props["noise_bursts"] == 0.0

    def test_saturation(self):
        x = np.sign(_tone(220.0, 16000))  # square wave pinned at +-1
        props = self._props(x)
        assert props["saturation"] == 1.0
        assert props["clipping"] == 1.0

    def test_dc_offset(self):
        props = self._props(_tone(220.0, 16000, amp=0.3) + 0.2)
        assert props["dc_offset"] == 1.0
        assert self._props(_tone(220.0, 16000, amp=0.3) + 0.01)["dc_offset"] == 0.0

    def test_short_buffer_single_frame(self):
        report = Q.detect_problems(np.full(512, 0.5))
        assert report.total_frames == 1
        assert report.proportions["dc_offset"] == 1.0

    def test_proportions_bounded(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            arr = Q.detect_problems(np.clip(rng.normal(0, 0.8, 16000), -1, 1)).as_array()
            assert np.all(arr >= 0.0) and np.all(arr <= 1.0)

    def test_empty_buffer_rejected(self):
        with pytest.raises(ValueError):
            Q.detect_problems(np.array([]))


class TestCompression:
    def test_constant_signal_highly_compressible(self):
        assert Q.compression_score(np.zeros(16000)).c > 0.95

    def test_noise_incompressible(self):
        rng = np.random.default_rng(4)
        assert Q.compression_score(rng.uniform(-1, 1, 16000)).c < 0.2

    def test_periodic_tone_beats_noise(self):
        rng = np.random.default_rng(5)
        tone = Q.compression_score(_tone(200.0)).c
        noise = Q.compression_score(rng.uniform(-1, 1, 16000)).c
        assert tone > noise

    def test_matches_reference(self):
        rng = np.random.default_rng(6)
        for x in (_tone(200.0), rng.normal(0, 0.3, 8000), np.zeros(4000)):
            assert Q.compression_score(x).c == compressibility_reference(x)

    def test_bounds(self):
        rng = np.random.default_rng(7)
        for x in (np.zeros(1000), rng.uniform(-1, 1, 1000), _tone(100.0, 2000)):
            score = Q.compression_score(x)
            assert 0.0 <= score.c < 1.0
            assert score.raw_bytes == 2 * len(x)

    def test_polarity_invariance_is_exact(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            x = rng.normal(0, 0.4, 4000)
            assert Q.compression_score(x).c == Q.compression_score(-x).c


class TestRefFree:
    def _buf(self, x):
        return np.asarray(x, dtype=np.float64)

    def test_composition(self):
        for x in (_tone(220.0, 64000), np.clip(_tone(220.0, 16000) * 3, -1, 1)):
            report = Q.detect_problems(x)
            score = Q.compression_score(x)
            want = (sum(1.0 - report.proportions[n] for n in Q.PROBLEM_NAMES) + score.c) / 7.0
            assert Q.q_ref_free(x) == want

    def test_clean_tone_beats_clipped_noise(self):
        rng = np.random.default_rng(10)
        clean = _tone(200.0)
        clipped = np.clip(3.0 * rng.normal(0, 1, 16000), -1, 1)
        assert Q.q_ref_free(clean) > Q.q_ref_free(clipped)

    def test_polarity_flip_invariance(self):
        rng = np.random.default_rng(11)
        signals = [
            _tone(330.0),
            rng.normal(0, 0.3, 16000),
            np.clip(_tone(110.0) * 4, -1, 1),
        ]
        for x in signals:
            x = x - x.mean()
            assert Q.q_ref_free(x) == Q.q_ref_free(-x)

    def test_bounded(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            x = np.clip(rng.normal(0, 0.6, 16000), -1, 1)
            assert 0.0 <= Q.q_ref_free(x) <= 1.0
