import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agemim import backbone as bb
from agemim import diffcore as dc


def _params(c=3, d=5, h=4, widths=(6,), seed=0):
    cfg = bb.BackboneConfig(in_channels=c, encoder_widths=widths, embed_dim=d, attn_hidden=h)
    return bb.init_backbone(cfg, np.random.default_rng(seed))


def _brute_stats(fmap, alpha):
    # fmap: t x c, alpha: t; plain loops over frames
    t, c = fmap.shape
    mu = np.zeros(c)
    for k in range(t):
        mu += alpha[k] * fmap[k]
    var = np.zeros(c)
    for k in range(t):
        var += alpha[k] * fmap[k] ** 2
    var -= mu ** 2
    return np.concatenate([mu, np.sqrt(np.maximum(var, bb.VAR_FLOOR))])


class TestEncode:
    def test_zero_weights_give_zero_map(self):
        p = {k: np.zeros_like(v) for k, v in _params().items()}
        frames = np.random.default_rng(1).standard_normal((3, 7))
        assert np.all(bb.encode(frames, p) == 0)

    def test_identity_layer(self):
        frames = np.abs(np.random.default_rng(2).standard_normal((3, 7)))
        p = {"enc.0.w": np.eye(3), "enc.0.b": np.zeros(3)}
        np.testing.assert_array_equal(bb.encode(frames, p), frames)

    def test_two_layer_shape(self):
        p = _params(widths=(8, 6))
        out = bb.encode(np.random.default_rng(3).standard_normal((3, 9)), p)
        assert out.shape == (6, 9) and np.all(np.isfinite(out))


class TestStatsPool:
    def test_constant_frames(self):
        fmap = np.full((5, 2), 4.0)
        out = bb.pooled_stats(fmap).data[0]
        np.testing.assert_allclose(out[:2], 4.0)
        assert np.all(out[2:] <= 1e-4)

    def test_two_point(self):
        out = bb.pooled_stats(np.array([[1.0], [3.0]])).data[0]
        np.testing.assert_allclose(out, [2.0, 1.0])

    def test_identity_projection_matches_oracle(self):
        fmap = np.random.default_rng(4).standard_normal((4, 2))  # t=4, c=2
        p = {"pool.w": np.eye(4), "pool.b": np.zeros(4)}
        out = bb.stats_pool(fmap, p).data[0]
        np.testing.assert_allclose(out, _brute_stats(fmap, np.full(4, 0.25)), atol=1e-12)

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            bb.pooled_stats(np.ones((1, 3)))


class TestAttentivePool:
    def test_uniform_attention_equals_plain_pooling(self):
        p = _params()
        p["asp.attn.v"] = np.zeros_like(p["asp.attn.v"])
        fmap = np.random.default_rng(5).standard_normal((2, 7, 6))
        plain = bb.pooled_stats(fmap).data
        attentive = bb.attentive_stats(fmap, p).data
        assert np.abs(plain - attentive).max() <= 1e-12

    def test_one_hot_attention(self):
        fmap = np.random.default_rng(6).standard_normal((1, 5, 3))
        logits = np.full(5, -30.0)
        logits[2] = 30.0
        alpha = dc.softmax(dc.Tensor(logits.reshape(1, 5)))
        out = bb.weighted_stats(fmap, alpha).data[0]
        np.testing.assert_allclose(out[:3], fmap[0, 2], atol=1e-12)
        assert np.all(out[3:] < 1e-3)

    def test_logits_are_clamped(self):
        p = _params()
        p["asp.attn.v"] = np.full_like(p["asp.attn.v"], 1e6)
        alpha = bb.attention_weights(np.random.default_rng(7).standard_normal((1, 4, 6)), p)
        assert np.all(np.isfinite(alpha.data))

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(8)
        p = _params(seed=8)
        fmap = rng.standard_normal((1, 6, 6))
        hidden = np.tanh(fmap[0] @ p["asp.attn.w"] + p["asp.attn.b"])
        logits = np.clip((hidden @ p["asp.attn.v"]).ravel(), -30, 30)
        alpha = np.exp(logits - logits.max())
        alpha /= alpha.sum()
        expected = _brute_stats(fmap[0], alpha) @ p["asp.w"] + p["asp.b"]
        np.testing.assert_allclose(bb.attentive_stats_pool(fmap, p).data[0], expected, atol=1e-12)


class TestDisentangle:
    def test_examples(self):
        np.testing.assert_array_equal(bb.disentangle([1.0, 2.0], [0.5, 0.5]).data, [0.5, 1.5])
        x = np.array([3.0, -1.0])
        np.testing.assert_array_equal(bb.disentangle(x, np.zeros(2)).data, x)
        np.testing.assert_array_equal(bb.disentangle(x, x).data, np.zeros(2))

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            bb.disentangle(np.ones(3), np.ones(2))


class TestForwardBatch:
    def test_batch_of_one_matches(self):
        p = _params()
        frames = np.random.default_rng(9).standard_normal((4, 3, 6))
        batched = bb.forward_batch(frames, p)
        single = bb.forward_batch(frames[2:3], p)
        for a, b in zip(batched, single):
            np.testing.assert_allclose(a.data[2], b.data[0], atol=1e-12)

    def test_permutation_equivariance(self):
        p = _params()
        frames = np.random.default_rng(10).standard_normal((5, 3, 6))
        perm = np.array([3, 0, 4, 1, 2])
        a = bb.embed(frames, p)
        b = bb.embed(frames[perm], p)
        for name in ("x_init", "x_age", "x_id"):
            np.testing.assert_array_equal(getattr(a, name)[perm], getattr(b, name))

    def test_triples_are_additive(self):
        p = _params()
        frames = np.random.default_rng(11).standard_normal((4, 3, 6))
        x_init, x_age, x_id = (t.data for t in bb.forward_batch(frames, p))
        assert np.abs(x_age + x_id - x_init).max() <= 1e-12

    def test_feature_sequence_validation(self):
        with pytest.raises(ValueError):
            bb.FeatureSequence(np.ones((3, 1)), "u", 0, 20.0)
        with pytest.raises(ValueError):
            bb.FeatureSequence(np.full((3, 4), np.nan), "u", 0, 20.0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 1000))
    def test_embed_shapes(self, n, t, seed):
        frames = np.random.default_rng(seed).standard_normal((n, 3, t))
        emb = bb.embed(frames, _params())
        assert emb.x_init.shape == emb.x_age.shape == emb.x_id.shape == (n, 5)
