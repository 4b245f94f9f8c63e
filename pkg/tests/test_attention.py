import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from occlutrack import memory as mem
from occlutrack.attention import AttentionWeights, attention_matrix, non_local, refine
from occlutrack.geometry import adaptive_weight
from occlutrack.tensor import ConvLayer, ShapeError
from occlutrack.trainer import TARGET_BOX, random_signatures, render_patch


def identity_weights(c: int) -> AttentionWeights:
    return AttentionWeights(ConvLayer.identity(c), ConvLayer.identity(c), ConvLayer.identity(c))


class TestNonLocal:
    def test_single_location_returns_reference(self, rng):
        w = AttentionWeights.random(rng, 4)
        w.rho = ConvLayer.identity(4)
        ref = rng.normal(size=(4, 1, 1))
        for _ in range(3):
            out = non_local(rng.normal(size=(4, 1, 1)), ref, w)
            assert_allclose(out.data, ref, rtol=0, atol=1e-15)

    def test_zero_reference_gives_zero(self, rng):
        w = AttentionWeights.random(rng, 3)
        w.rho.bias.data[:] = 0.0
        out = non_local(rng.normal(size=(3, 4, 4)), np.zeros((3, 4, 4)), w)
        assert_array_equal(out.data, 0.0)

    def test_two_locations_hand_softmax(self):
        s = 1.5
        ref = np.zeros((2, 1, 2))
        ref[0, 0, 0] = s  # location 1 along e1
        ref[1, 0, 1] = s  # location 2 along e2, orthogonal with equal norm
        query = ref.copy()
        a = attention_matrix(query, ref, identity_weights(2)).data
        e = np.exp(s * s)
        assert_allclose(a[0], [e / (e + 1), 1 / (e + 1)], rtol=1e-14)

    def test_shape_preserved(self, rng):
        w = AttentionWeights.random(rng, 5)
        assert non_local(rng.normal(size=(5, 3, 7)), rng.normal(size=(5, 3, 7)), w).shape == (5, 3, 7)

    def test_shape_mismatch(self, rng):
        w = AttentionWeights.random(rng, 3)
        with pytest.raises(ShapeError):
            non_local(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), w)

    def test_batch_matches_single(self, rng):
        w = AttentionWeights.random(rng, 3)
        q, r = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
        batched = non_local(q, r, w).data
        for n in range(2):
            assert_allclose(batched[n], non_local(q[n], r[n], w).data, rtol=0, atol=1e-13)

    @given(st.integers(0, 2**31), st.floats(0.1, 20.0))
    def test_rows_sum_to_one(self, seed, scale):
        r = np.random.default_rng(seed)
        w = AttentionWeights.random(r, 3, gain=scale)
        a = attention_matrix(r.normal(size=(3, 3, 4)) * scale, r.normal(size=(3, 3, 4)), w).data
        assert np.all(a >= 0)
        assert_allclose(a.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_weights_must_be_square_1x1(self, rng):
        with pytest.raises(ShapeError):
            AttentionWeights(ConvLayer.random(rng, 3, 3, 3), ConvLayer.identity(3), ConvLayer.identity(3))
        with pytest.raises(ShapeError):
            AttentionWeights(ConvLayer.random(rng, 3, 4, 1), ConvLayer.identity(3), ConvLayer.identity(3))


class TestRefine:
    @pytest.fixture
    def maps(self, rng):
        return [rng.normal(size=(4, 5, 5)) for _ in range(4)]

    def test_zero_weight_is_bitwise_identity(self, rng, maps):
        f, q, t, d = maps
        out = refine(f, q, t, d, 0.0, AttentionWeights.random(rng, 4))
        assert_array_equal(out.data, f)

    def test_without_distractor(self, rng, maps):
        f, q, t, _ = maps
        w = AttentionWeights.random(rng, 4)
        out = refine(f, q, t, None, 1.0, w)
        assert_allclose(out.data, f + non_local(q, t, w).data, rtol=0, atol=1e-13)

    @given(st.floats(0.0, 1.0), st.integers(0, 2**31))
    def test_identical_references_cancel(self, weight, seed):
        r = np.random.default_rng(seed)
        f, q, t = (r.normal(size=(3, 4, 4)) for _ in range(3))
        out = refine(f, q, t, t.copy(), weight, AttentionWeights.random(r, 3))
        assert np.abs(out.data - f).max() <= 1e-12

    def test_linear_in_weight(self, rng, maps):
        f, q, t, d = maps
        w = AttentionWeights.random(rng, 4)
        half = refine(f, q, t, d, 0.5, w).data
        full = refine(f, q, t, d, 1.0, w).data
        assert_allclose(full - f, 2 * (half - f), rtol=1e-12, atol=1e-13)

    def test_ablation_switches(self, rng, maps):
        f, q, t, d = maps
        w = AttentionWeights.random(rng, 4)
        ta = non_local(q, t, w).data
        da = non_local(q, d, w).data
        assert_allclose(refine(f, q, t, d, 0.4, w, use_distractor=False).data, f + 0.4 * ta, atol=1e-13)
        assert_allclose(refine(f, q, t, d, 0.4, w, use_target=False).data, f - 0.4 * da, atol=1e-13)
        assert_array_equal(refine(f, q, t, d, 0.4, w, use_target=False, use_distractor=False).data, f)

    @pytest.mark.parametrize("weight", [-0.1, 1.01])
    def test_weight_range(self, rng, maps, weight):
        f, q, t, d = maps
        with pytest.raises(ValueError):
            refine(f, q, t, d, weight, AttentionWeights.random(rng, 4))

    def test_shape_mismatch(self, rng, maps):
        f, q, t, _ = maps
        with pytest.raises(ShapeError):
            refine(f, q, t, np.zeros((4, 5, 6)), 0.5, AttentionWeights.random(rng, 4))


class TestFocus:
    def test_refinement_moves_toward_target(self, default_model):
        """Half the ROI shows the occluder; refinement should raise target similarity."""
        m = default_model
        wins = 0
        for s in range(100):
            rng = np.random.default_rng([s, 404])
            sig_t, sig_d = random_signatures(rng, 2, m.channels)
            off = (16 if s % 2 else -16, 0)  # covers exactly half the target width
            feat = render_patch(rng, sig_t, 0.1, occluder=sig_d, occluder_offset=off, roi_jitter=0)
            t_ref = mem.aggregate([render_patch(rng, sig_t, 0.1, roi_jitter=2) for _ in range(3)], m.memory)
            d_ref = mem.aggregate([render_patch(rng, sig_d, 0.1, roi_jitter=2) for _ in range(3)], m.memory)
            w = adaptive_weight(TARGET_BOX, TARGET_BOX.shifted(*off))
            query = mem.extract_embedding(feat, m.memory)
            out = refine(feat, query, t_ref.state, d_ref.state, w, m.attention).data
            wins += mem.pool(out) @ sig_t > mem.pool(feat) @ sig_t
        assert wins >= 95
