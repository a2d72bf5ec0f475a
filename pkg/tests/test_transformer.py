import numpy as np
import pytest

from splineformer import ShapeError, DomainError
from splineformer import autodiff as ad
from splineformer.autodiff import Tensor
from splineformer import transformer as tf
from splineformer.transformer import ModelConfig


def tensors(params, requires_grad=False):
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def small_config(**kw):
    base = dict(image_size=16, patch_size=4, embed_dim=8, n_heads=2, n_encoder_layers=1,
                n_decoder_layers=1, ffn_hidden=12, dropout_rate=0.0, max_seq_len=6)
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.image_size, c.patch_size, c.embed_dim, c.n_heads) == (64, 8, 64, 4)
        assert c.n_patches == 64 and c.head_dim == 16

    def test_invalid(self):
        with pytest.raises(ShapeError):
            ModelConfig(image_size=60, patch_size=8)
        with pytest.raises(ShapeError):
            ModelConfig(embed_dim=30, n_heads=4)
        with pytest.raises(DomainError):
            ModelConfig(n_decoder_layers=0)

    def test_json_round_trip(self):
        c = small_config()
        import json
        assert ModelConfig.from_dict(json.loads(c.to_json())) == c


class TestPatchify:
    def test_counts(self):
        img = np.random.default_rng(0).random((64, 64))
        p = tf.patchify(img, 8)
        assert p.shape == (64, 64)
        np.testing.assert_array_equal(p[1], img[:8, 8:16].ravel())
        np.testing.assert_array_equal(p[8], img[8:16, :8].ravel())

    def test_single_patch(self):
        img = np.arange(64.0).reshape(8, 8)
        np.testing.assert_array_equal(tf.patchify(img, 8), img.reshape(1, 64))

    def test_constant(self):
        assert np.all(tf.patchify(np.full((16, 16), 0.3), 4) == 0.3)

    def test_batched(self):
        imgs = np.random.default_rng(1).random((3, 16, 16))
        np.testing.assert_array_equal(tf.patchify(imgs, 4)[2], tf.patchify(imgs[2], 4))

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            tf.patchify(np.zeros((10, 10)), 4)


class TestPositionalEncoding:
    def test_position_zero(self):
        np.testing.assert_array_equal(tf.positional_encoding(4, 6)[0], [0, 1, 0, 1, 0, 1])

    def test_range_and_distinct(self):
        pe = tf.positional_encoding(16, 8)
        assert np.all(np.abs(pe) <= 1)
        d = np.linalg.norm(pe[:, None] - pe[None], axis=-1)
        assert np.all(d[~np.eye(16, dtype=bool)] > 0)

    def test_frequency(self):
        pe = tf.positional_encoding(5, 8)
        assert pe[3, 2] == pytest.approx(np.sin(3 * 10000 ** (-2 / 8)))
        assert pe[3, 5] == pytest.approx(np.cos(3 * 10000 ** (-4 / 8)))

    def test_odd(self):
        with pytest.raises(ShapeError):
            tf.positional_encoding(4, 5)


def identity_mha(dim):
    params = {}
    for n in "qkvo":
        params[f"a.{n}.w"] = Tensor(np.eye(dim))
        params[f"a.{n}.b"] = Tensor(np.zeros(dim))
    return params


class TestAttention:
    def test_scalar(self):
        out, probs = tf.mha(Tensor([[1.0]]), Tensor([[1.0]]), identity_mha(1), "a", 1)
        assert out.data.tolist() == [[1.0]] and probs.tolist() == [[[1.0]]]

    def test_identical_rows(self):
        rng = np.random.default_rng(2)
        kv = np.tile(rng.normal(size=(1, 4)), (2, 1))
        q = rng.normal(size=(3, 4))
        out, _ = tf.mha(Tensor(q), Tensor(kv), identity_mha(4), "a", 2)
        np.testing.assert_allclose(out.data, np.tile(kv[0], (3, 1)), atol=1e-14)

    def test_causal_hand_computed(self):
        x = np.array([[1.0, 0.0], [0.5, 2.0]])
        out, probs = tf.mha(Tensor(x), Tensor(x), identity_mha(2), "a", 1, tf.causal_mask(2))
        s = x[1] @ x.T / np.sqrt(2)
        w = np.exp(s) / np.exp(s).sum()
        np.testing.assert_allclose(out.data[0], x[0])
        np.testing.assert_allclose(out.data[1], w @ x)
        assert probs[0, 0, 1] == 0.0

    def test_mask_shape(self):
        with pytest.raises(ShapeError):
            tf.attention(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))),
                         np.zeros((2, 2)))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        params = {}
        tf.init_mha(params, rng, "a", 8)
        _, probs = tf.mha(Tensor(rng.normal(size=(2, 5, 8))), Tensor(rng.normal(size=(2, 7, 8))),
                          tensors(params), "a", 4)
        assert probs.shape == (2, 4, 5, 7)
        assert np.all(np.abs(probs.sum(-1) - 1) < 1e-6) and np.all((probs >= 0) & (probs <= 1))


class TestFFNAndSublayer:
    def setup_method(self):
        rng = np.random.default_rng(4)
        params = {}
        tf.init_ffn(params, rng, "f", 6, 10)
        self.params = tensors(params)
        self.x = Tensor(rng.normal(size=(5, 6)))

    def test_zero(self):
        p = dict(self.params)
        p["f.fc1.b"] = Tensor(np.zeros(10))
        p["f.fc2.b"] = Tensor(np.zeros(6))
        assert np.all(tf.ffn(Tensor(np.zeros((3, 6))), p, "f").data == 0)

    def test_eval_deterministic_and_rate_zero(self):
        a = tf.ffn(self.x, self.params, "f", 0.5, False, 1).data
        b = tf.ffn(self.x, self.params, "f", 0.5, False, 2).data
        c = tf.ffn(self.x, self.params, "f", 0.0, True, 3).data
        assert np.array_equal(a, b) and np.array_equal(a, c)
        assert not np.array_equal(a, tf.ffn(self.x, self.params, "f", 0.5, True, 1).data)

    def test_sublayer_zero_function(self):
        out = tf.sublayer(self.x, lambda h: h * 0.0)
        np.testing.assert_array_equal(out.data, ad.layernorm(self.x).data)
        assert np.all(np.abs(out.data.mean(-1)) < 1e-10)
        assert np.all(np.abs(out.data.var(-1) - 1) < 1e-8)

    def test_sublayer_scale_invariance(self):
        x = self.x.data - self.x.data.mean(-1, keepdims=True)
        out = tf.sublayer(Tensor(x), lambda h: h)
        np.testing.assert_allclose(out.data, ad.layernorm(Tensor(x)).data, atol=1e-12)

    def test_sublayer_shape_change(self):
        with pytest.raises(ShapeError):
            tf.sublayer(self.x, lambda h: h[:, :3])


class TestStacks:
    def setup_method(self):
        self.config = small_config(n_encoder_layers=2, n_decoder_layers=2)
        rng = np.random.default_rng(5)
        params = {}
        tf.init_encoder(params, rng, self.config)
        tf.init_decoder(params, rng, self.config)
        self.params = tensors(params)
        self.rng = rng

    def test_encoder_shape_and_maps(self):
        x = Tensor(self.rng.normal(size=(16, 8)))
        mem, maps = tf.encoder_forward(x, self.params, self.config)
        assert mem.shape == (16, 8) and len(maps) == 2 and maps[0].shape == (2, 16, 16)
        again, _ = tf.encoder_forward(x, self.params, self.config)
        assert np.array_equal(mem.data, again.data)

    def test_encoder_empty_stack(self):
        x = Tensor(self.rng.normal(size=(16, 8)))
        mem, _ = tf.encoder_forward(x, self.params, self.config, n_layers=0)
        assert mem is x

    def test_decoder_shape(self):
        y = Tensor(self.rng.normal(size=(3, 6, 8)))
        mem = Tensor(self.rng.normal(size=(3, 16, 8)))
        out, maps = tf.decoder_forward(y, mem, self.params, self.config)
        assert out.shape == (3, 6, 8) and maps[1]["cross"].shape == (3, 2, 6, 16)
        assert np.all(maps[0]["self"][..., np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0)

    def test_causality_exact(self):
        mem = Tensor(self.rng.normal(size=(16, 8)))
        for _ in range(20):
            y = self.rng.normal(size=(6, 8))
            j = int(self.rng.integers(0, 5))
            y2 = y.copy()
            y2[j + 1:] = self.rng.normal(size=(5 - j, 8))
            a, _ = tf.decoder_forward(Tensor(y), mem, self.params, self.config)
            b, _ = tf.decoder_forward(Tensor(y2), mem, self.params, self.config)
            assert np.array_equal(a.data[:j + 1], b.data[:j + 1])

    def test_single_token_and_single_memory(self):
        y = Tensor(self.rng.normal(size=(1, 8)))
        mem = Tensor(self.rng.normal(size=(1, 8)))
        _, maps = tf.decoder_forward(y, mem, self.params, self.config)
        assert np.all(maps[0]["self"] == 1.0) and np.all(maps[0]["cross"] == 1.0)

    def test_gradient_check_one_layer_each(self):
        config = small_config()
        rng = np.random.default_rng(6)
        raw = {}
        tf.init_encoder(raw, rng, config)
        tf.init_decoder(raw, rng, config)
        for k in raw:
            raw[k] = raw[k] + 0.1 * rng.normal(size=raw[k].shape)
        params = tensors(raw, requires_grad=True)
        x = Tensor(rng.normal(size=(2, 16, 8)))
        y = Tensor(rng.normal(size=(2, 6, 8)))
        w = rng.normal(size=(2, 6, 8))

        def loss():
            mem, _ = tf.encoder_forward(x, params, config)
            out, _ = tf.decoder_forward(y, mem, params, config)
            return (out * w).sum()
        report = ad.grad_check(loss, params, tol=1e-4)
        assert report.passed, str(report)
