import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sinkgate.attention import dense_attention
from sinkgate.kv_cache import CacheConfig, GroupAnchor, KvCache
from sinkgate.profile import ThresholdProfile, threshold_for_length
from sinkgate.router import (RoutingConfig, Verdict, dense_decode_step, group_score, head_scores, inject_fault,
                             proxy_score, route, routed_decode_step, skip_ratio)
from tests.conftest import max_abs


def anchor(k):
    return GroupAnchor.from_key(np.asarray(k, dtype=np.float32))


def constant(tau, excluded=(0, 1)):
    return RoutingConfig(ThresholdProfile.constant(tau), excluded_layers=excluded)


def random_cache(rng, layers=3, hq=8, hkv=4, d=16, length=40):
    cache = KvCache(CacheConfig(layers, hq, hkv, d, length))
    for layer in range(layers):
        for g in range(hkv):
            cache.extend(layer, g, rng.normal((length, d)), rng.normal((length, d)))
    return cache


class TestProxy:
    def test_self_similarity(self):
        assert proxy_score([0.3, -2.0, 5.0], anchor([0.3, -2.0, 5.0])) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert proxy_score([1.0, 0.0], anchor([0.0, 1.0])) == 0.0

    def test_closed_form(self):
        assert proxy_score([1.0, 1.0], anchor([1.0, 0.0])) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_degenerate_query(self):
        s, deg = head_scores(np.zeros((2, 3)), anchor([1.0, 0.0, 0.0]))
        assert list(s) == [0.0, 0.0] and deg.all()

    @settings(max_examples=100)
    @given(st.lists(st.floats(-100, 100), min_size=4, max_size=4),
           st.lists(st.floats(-100, 100), min_size=4, max_size=4),
           st.floats(1e-3, 1e3))
    def test_bounded_and_scale_invariant(self, q, k, c):
        k = np.asarray(k, dtype=np.float32)
        q = np.asarray(q, dtype=np.float32)
        if np.linalg.norm(k) < 1e-6 or np.linalg.norm(q) < 1e-6:
            return
        a = anchor(k)
        s = proxy_score(q, a)
        assert -1.0 <= s <= 1.0
        assert proxy_score(q * np.float32(c), a) == pytest.approx(s, abs=1e-6)


class TestGroupScore:
    def test_mean(self):
        assert group_score([0.6, 0.5, 0.7, 0.4]) == pytest.approx(0.55, abs=1e-12)

    def test_equal_values(self):
        assert group_score([0.3] * 4) == pytest.approx(0.3, abs=1e-15)

    def test_single_head(self):
        assert group_score([-0.2], r=1) == -0.2

    def test_wrong_arity(self):
        with pytest.raises(ValueError):
            group_score([0.1, 0.2, 0.3], r=4)


class TestThreshold:
    @pytest.mark.parametrize("length", [1, 100, 8192, 10**6])
    def test_constant(self, length):
        assert threshold_for_length(length, ThresholdProfile.constant(0.55)) == 0.55

    def test_cubic_term(self):
        p = ThresholdProfile((1.0, 0.0, 0.0, 0.0), length_normalizer=1000.0)
        assert threshold_for_length(500, p) == 0.125

    def test_clamped(self):
        p = ThresholdProfile((0.0, 0.0, 5.0, 0.0), length_normalizer=1.0, clamp=(0.0, 0.9))
        assert threshold_for_length(10, p) == 0.9


class TestRoute:
    def test_strictly_above_skips(self):
        assert route(5, 0.56, 100, constant(0.55)).verdict is Verdict.SINK

    def test_tie_is_active(self):
        assert route(5, 0.55, 100, constant(0.55)).verdict is Verdict.ACTIVE

    def test_excluded_layer(self):
        d = route(0, 0.99, 100, constant(0.55))
        assert d.verdict is Verdict.ACTIVE and d.excluded

    def test_fault_flips_tie(self):
        with inject_fault("tie-breaking"):
            assert route(5, 0.55, 100, constant(0.55)).verdict is Verdict.SINK
        assert route(5, 0.55, 100, constant(0.55)).verdict is Verdict.ACTIVE

    def test_unknown_fault(self):
        with pytest.raises(ValueError):
            with inject_fault("nope"):
                pass


class TestDecodeStep:
    def test_threshold_above_one_matches_dense(self, rng):
        cache = random_cache(rng)
        q = rng.normal((8, 16))
        out, decisions, c = routed_decode_step(2, q, cache, constant(1.5), num_splits=3)
        assert all(d.verdict is Verdict.ACTIVE for d in decisions)
        for g in range(4):
            k, v = cache.historical_view(2, g, 0, 40)
            assert max_abs(out[2 * g:2 * g + 2], dense_attention(q[2 * g:2 * g + 2], k, v)) <= 1e-5
        assert c.kv_floats_loaded == 4 * 2 * 40 * 16
        assert c.anchor_floats_loaded == 4 * 16

    def test_threshold_below_minus_one_skips_all(self, rng):
        cache = random_cache(rng)
        out, decisions, c = routed_decode_step(2, rng.normal((8, 16)), cache, constant(-1.5))
        assert all(d.verdict is Verdict.SINK for d in decisions)
        assert not out.any()
        assert c.kv_floats_loaded == 0
        assert (c.groups_skipped, c.groups_active) == (4, 0)

    def test_excluded_layer_never_skips(self, rng):
        cache = random_cache(rng)
        _, decisions, c = routed_decode_step(0, rng.normal((8, 16)), cache, constant(-1.5))
        assert all(d.verdict is Verdict.ACTIVE for d in decisions)
        assert skip_ratio(decisions) == 0.0
        assert c.groups_skipped == 0

    def test_planted_half_groups(self, rng):
        d, hkv, length = 16, 8, 32
        cache = KvCache(CacheConfig(1, 16, hkv, d, length))
        q = rng.normal((16, d)).astype(np.float64)
        aligned = set(rng.permutation(hkv)[:hkv // 2].tolist())
        for g in range(hkv):
            heads = q[2 * g:2 * g + 2]
            if g in aligned:
                heads[1] = heads[0]          # both heads share the anchor direction
                k0 = heads[0]
            else:
                basis = np.linalg.qr(np.c_[heads.T, rng.normal(d)])[0]
                k0 = basis[:, 2]             # orthogonal to both heads
            keys = rng.normal((length, d))
            keys[0] = k0
            cache.extend(0, g, keys, rng.normal((length, d)))
        out, decisions, _ = routed_decode_step(0, q.astype(np.float32), cache, constant(0.5, excluded=()))
        scores = [dec.group_score for dec in decisions]
        for g in range(hkv):
            expected = 1.0 if g in aligned else 0.0
            assert scores[g] == pytest.approx(expected, abs=1e-6)
        assert skip_ratio(decisions) == 0.5
        for g in range(hkv):
            rows = out[2 * g:2 * g + 2]
            assert (not rows.any()) == (g in aligned)

    def test_degenerate_query_routes_active(self, rng):
        cache = random_cache(rng)
        q = rng.normal((8, 16))
        q[0] = 0.0
        _, decisions, _ = routed_decode_step(2, q, cache, constant(-1.5))
        assert decisions[0].degenerate and decisions[0].verdict is Verdict.ACTIVE
        assert decisions[1].verdict is Verdict.SINK

    def test_scale_invariant_verdicts(self, rng):
        cache = random_cache(rng)
        q = rng.normal((8, 16))
        cfg = constant(0.0)
        base = [d.verdict for d in routed_decode_step(2, q, cache, cfg)[1]]
        for c in (1e-3, 0.5, 7.0, 1e4):
            assert [d.verdict for d in routed_decode_step(2, q * c, cache, cfg)[1]] == base

    def test_deterministic(self, rng):
        cache = random_cache(rng)
        q = rng.normal((8, 16))
        a = routed_decode_step(2, q, cache, constant(0.1), num_splits=4)
        b = routed_decode_step(2, q, cache, constant(0.1), num_splits=4)
        assert np.array_equal(a[0], b[0])
        assert [d.verdict for d in a[1]] == [d.verdict for d in b[1]]
        assert a[2].traffic() == b[2].traffic()

    def test_observe_runs_everything(self, rng):
        cache = random_cache(rng)
        q = rng.normal((8, 16))
        out, decisions, c = routed_decode_step(2, q, cache, constant(-1.5), observe=True)
        dense, _ = dense_decode_step(2, q, cache)
        assert all(d.verdict is Verdict.SINK for d in decisions)
        assert max_abs(out, dense) <= 1e-6
        assert c.groups_active == 4

    def test_shape_checked(self, rng):
        with pytest.raises(ValueError):
            routed_decode_step(2, rng.normal((4, 16)), random_cache(rng), constant(0.5))
