import zlib

import numpy as np
import pytest

from splineformer import DomainError, NumericError, ShapeError, CheckpointError
from splineformer import autodiff as ad
from splineformer.autodiff import Tensor

from oracles import central_difference


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(ad.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_gelu_zero(self):
        assert ad.gelu(Tensor(0.0)).item() == 0.0

    def test_gelu_exact(self):
        from scipy.stats import norm
        x = np.linspace(-4, 4, 17)
        np.testing.assert_allclose(ad.gelu(Tensor(x)).data, x * norm.cdf(x), rtol=1e-14, atol=1e-15)

    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(np.eye(2))).data, a)

    def test_shape_errors_name_primitive(self):
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.ones(3)) + Tensor(np.ones(4))
        with pytest.raises(ShapeError, match="concat"):
            ad.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)

    def test_dropout_rate_checked(self):
        with pytest.raises(DomainError):
            ad.dropout(Tensor(np.ones(3)), 1.0, True, 0)

    def test_dropout_eval_identity(self):
        x = Tensor(np.arange(6.0))
        assert ad.dropout(x, 0.5, False, 3) is x

    def test_dropout_deterministic_by_key(self):
        x = Tensor(np.ones((50, 50)))
        a = ad.dropout(x, 0.3, True, 7, site=2).data
        b = ad.dropout(x, 0.3, True, 7, site=2).data
        c = ad.dropout(x, 0.3, True, 7, site=3).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert abs((a == 0).mean() - 0.3) < 0.03
        np.testing.assert_allclose(a[a != 0], 1 / 0.7)

    def test_constants_do_not_record(self):
        y = Tensor(np.ones(3)) * 2.0
        assert not y.requires_grad and y._backward is None

    def test_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = x * x
        assert not y.requires_grad

    def test_float32_preserved(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        y = ad.layernorm(ad.gelu(x * 0.5 + 1.0) @ x)
        assert y.dtype == np.float32

    def test_conv2d_matches_direct(self):
        from scipy.signal import correlate
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(2, 3, 9, 9)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for n in range(2):
            for o in range(4):
                ref = correlate(xp[n], w[o], mode="valid")[0][::2, ::2] + b[o]
                np.testing.assert_allclose(out[n, o], ref, atol=1e-12)


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        grads = ad.backward(x * x)
        assert grads[x] == 6.0

    def test_sum_softmax_zero(self):
        rng = np.random.default_rng(1)
        x = param(rng, 3, 5)
        grads = ad.backward(ad.softmax(x).sum())
        np.testing.assert_allclose(grads[x], 0.0, atol=1e-15)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DomainError):
            ad.backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        assert ad.backward(y * y + y)[x] == pytest.approx(4 * 8 + 4)

    def test_mlp_against_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 4))
        shapes = [(4, 8), (8,), (8, 6), (6,), (6, 1), (1,)]
        values = [rng.normal(size=s) for s in shapes]

        def loss(ws):
            h = Tensor(x)
            for k in range(0, 6, 2):
                h = h @ ws[k] + ws[k + 1]
                if k < 4:
                    h = ad.tanh(h)
            return (h * h).mean()

        ts = [Tensor(v.copy(), requires_grad=True) for v in values]
        grads = ad.backward(loss(ts))
        for k, v in enumerate(values):
            def f(arr, k=k):
                ws = [Tensor(u) for u in values]
                ws[k] = Tensor(arr)
                return loss(ws).item()
            num = central_difference(f, v, 1e-6)
            err = ad.relative_error(grads[ts[k]], num).max()
            assert err < 1e-4, (k, err)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(4)
            w = param(rng, 6, 6)
            x = Tensor(rng.normal(size=(3, 6)))
            h = ad.dropout(ad.gelu(ad.layernorm(x @ w)), 0.2, True, 11)
            loss = ad.softmax(h @ w).sum() + (h * h).mean()
            return loss.data, ad.backward(loss)[w]
        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def _primitive_cases():
    """(name, builder) pairs; builder(rng) -> (loss fn, params)."""
    def shape(rng, n=2):
        return tuple(int(s) for s in rng.integers(1, 5, n))

    def unary(fn, pos=False):
        def build(rng):
            a = param(rng, *shape(rng, 2))
            if pos:
                a.data = np.abs(a.data) + 0.5
            w = rng.normal(size=a.shape)
            return (lambda: (fn(a) * w).sum()), {"a": a}
        return build

    def binary(fn, pos=False):
        def build(rng):
            s = shape(rng, 2)
            a, b = param(rng, *s), param(rng, 1, s[1])
            if pos:
                b.data = np.abs(b.data) + 0.5
            w = rng.normal(size=s)
            return (lambda: (fn(a, b) * w).sum()), {"a": a, "b": b}
        return build

    def matmul(rng):
        m, k, n = shape(rng, 3)
        a, b = param(rng, 2, m, k), param(rng, k, n)
        w = rng.normal(size=(2, m, n))
        return (lambda: (ad.matmul(a, b) * w).sum()), {"a": a, "b": b}

    def layernorm(rng):
        r, c = int(rng.integers(1, 5)), int(rng.integers(3, 8))  # width 2 normalises to ±1
        x, g, b = param(rng, r, c), param(rng, c), param(rng, c)
        w = rng.normal(size=(r, c))
        return (lambda: (ad.layernorm(x, g, b) * w).sum()), {"x": x, "gamma": g, "beta": b}

    def dropout(rng):
        a = param(rng, *shape(rng))
        w = rng.normal(size=a.shape)
        return (lambda: (ad.dropout(a, 0.3, True, 5) * w).sum()), {"a": a}

    def reshape(rng):
        r, c = shape(rng)
        a = param(rng, r, c)
        w = rng.normal(size=(c, r))
        return (lambda: (a.reshape(c, r) * w).sum()), {"a": a}

    def transpose(rng):
        a = param(rng, *shape(rng, 3))
        w = rng.normal(size=tuple(reversed(a.shape)))
        return (lambda: (a.T * w).sum()), {"a": a}

    def concat(rng):
        r, c = shape(rng)
        a, b = param(rng, r, c), param(rng, r, c + 1)
        w = rng.normal(size=(r, 2 * c + 1))
        return (lambda: (ad.concat([a, b], axis=1) * w).sum()), {"a": a, "b": b}

    def slice_(rng):
        a = param(rng, 4, 5)
        w = rng.normal(size=(2, 3))
        return (lambda: (a[1:3, ::2] * w).sum() + a[np.array([0, 0, 3]), 1].sum()), {"a": a}

    def embedding(rng):
        t = param(rng, 5, 3)
        idx = rng.integers(0, 5, size=(2, 4))
        w = rng.normal(size=(2, 4, 3))
        return (lambda: (ad.embedding(t, idx) * w).sum()), {"table": t}

    def reductions(rng):
        a = param(rng, *shape(rng, 3))
        w = rng.normal(size=a.shape[1:])
        return (lambda: (a.sum(axis=0) * w).sum() + a.mean(axis=(1, 2)).sum() * 3.0), {"a": a}

    def conv(rng):
        x, k, b = param(rng, 2, 2, 6, 5), param(rng, 3, 2, 3, 3), param(rng, 3)
        stride = int(rng.integers(1, 3))
        out_shape = ad.conv2d(x, k, b, stride, 1).shape
        w = rng.normal(size=out_shape)
        return (lambda: (ad.conv2d(x, k, b, stride, 1) * w).sum()), {"x": x, "w": k, "b": b}

    return [
        ("matmul", matmul), ("add", binary(ad.add)), ("sub", binary(ad.sub)),
        ("mul", binary(ad.mul)), ("div", binary(ad.div, pos=True)),
        ("softmax", unary(ad.softmax)), ("layernorm", layernorm), ("gelu", unary(ad.gelu)),
        ("relu", unary(ad.relu)), ("sigmoid", unary(ad.sigmoid)), ("tanh", unary(ad.tanh)),
        ("exp", unary(ad.exp)), ("log", unary(ad.log, pos=True)), ("dropout", dropout),
        ("reshape", reshape), ("transpose", transpose), ("concat", concat), ("slice", slice_),
        ("embedding", embedding), ("reductions", reductions), ("conv2d", conv),
    ]


@pytest.mark.parametrize("name,build", _primitive_cases(), ids=[n for n, _ in _primitive_cases()])
def test_primitive_gradients(name, build):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for trial in range(20):
        f, params = build(rng)
        if name == "relu":
            for p in params.values():
                p.data = np.where(np.abs(p.data) < 1e-3, 0.5, p.data)
        report = ad.grad_check(f, params, step=1e-6, tol=1e-4)
        assert report.passed, f"{name} trial {trial}:\n{report}"


class TestProperties:
    def test_softmax_rows(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = rng.normal(scale=20, size=(int(rng.integers(1, 8)), int(rng.integers(1, 30))))
            p = ad.softmax(Tensor(x)).data
            assert np.all(np.abs(p.sum(axis=-1) - 1) < 1e-12)
            assert np.all(p > 0) or np.all(np.isfinite(x))

    def test_softmax_positive_moderate(self):
        rng = np.random.default_rng(6)
        p = ad.softmax(Tensor(rng.normal(size=(20, 20)))).data
        assert np.all(p > 0)

    def test_softmax_masked_exact_zero(self):
        x = np.array([[0.3, -np.inf, 1.0]])
        p = ad.softmax(Tensor(x)).data
        assert p[0, 1] == 0.0 and abs(p.sum() - 1) < 1e-15

    def test_layernorm_stats(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = rng.normal(loc=rng.normal() * 5, scale=rng.uniform(0.1, 10), size=(4, 16))
            y = ad.layernorm(Tensor(x)).data
            assert np.all(np.abs(y.mean(axis=-1)) < 1e-10)
            assert np.all(np.abs(y.var(axis=-1) - 1) < 1e-8)


class TestGradCheck:
    def test_linear_layer_passes(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(6, 3)))
        w, b = param(rng, 3, 2), param(rng, 2)
        y = rng.normal(size=(6, 2))
        report = ad.grad_check(lambda: ((x @ w + b - y) ** 2).mean(), {"w": w, "b": b}, tol=1e-4)
        assert report.passed and set(report.errors) == {"w", "b"}

    def test_corrupted_rule_fails_with_name(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(6, 3)))
        w, b = param(rng, 3, 2), param(rng, 2)
        with ad.inject_fault("gelu", 1.01):
            report = ad.grad_check(lambda: ad.gelu(x @ w + b).sum(), {"w": w, "b": b})
        assert not report.passed
        assert report.worst in {"w", "b"} and "w" in report.failing()

    def test_nonfinite_reported(self):
        w = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        with np.errstate(invalid="ignore"):
            report = ad.grad_check(lambda: ad.log(w).sum(), {"w": w})
        assert not report.passed and report.nonfinite == ["w"]

    def test_sampled_entries(self):
        rng = np.random.default_rng(10)
        w = param(rng, 30, 30)
        report = ad.grad_check(lambda: ad.tanh(w).sum(), {"w": w}, max_entries=10)
        assert report.passed


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step(self):
        p = {"w": Tensor(np.array(0.0))}
        ad.adam_step(p, {"w": np.array(1.0)}, ad.AdamState(), lr=0.1, betas=(0.9, 0.999))
        assert p["w"].item() == pytest.approx(-0.1, rel=1e-6)

    def test_constant_gradient_monotone(self):
        p = {"a": Tensor(np.array(0.0)), "b": Tensor(np.array(0.0))}
        state = ad.AdamState()
        prev = (0.0, 0.0)
        for _ in range(100):
            ad.adam_step(p, {"a": np.array(0.3), "b": np.array(-2.0)}, state, lr=0.01)
            cur = (p["a"].item(), p["b"].item())
            assert cur[0] < prev[0] and cur[1] > prev[1]
            prev = cur
        assert state.step == 100

    def test_nonfinite_names_parameter(self):
        p = {"w": Tensor(np.zeros(2))}
        with pytest.raises(NumericError, match="'w'"):
            ad.adam_step(p, {"w": np.array([0.0, np.nan])}, ad.AdamState())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        tensors = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(2.5)}
        path = tmp_path / "m.splf"
        ad.write_checkpoint(path, tensors, {"config": {"embed_dim": 8}})
        header, back = ad.read_checkpoint(path)
        assert header == {"config": {"embed_dim": 8}}
        assert list(back) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k].astype(np.float32))

    def test_layout(self, tmp_path):
        import struct
        path = tmp_path / "m.splf"
        ad.write_checkpoint(path, {"x": np.array([[1.0, 2.0]])}, {})
        raw = path.read_bytes()
        assert raw[:4] == b"SPLF"
        version, hlen = struct.unpack_from("<II", raw, 4)
        pos = 12 + hlen
        assert version == 1
        assert struct.unpack_from("<I", raw, pos) == (1,) and raw[pos + 4:pos + 5] == b"x"
        assert struct.unpack_from("<I2Q2f", raw, pos + 5) == (2, 1, 2, 1.0, 2.0)

    def test_bad_files(self, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(b"NOPE")
        with pytest.raises(CheckpointError):
            ad.read_checkpoint(bad)
        good = tmp_path / "good"
        ad.write_checkpoint(good, {"x": np.ones(100)})
        trunc = tmp_path / "trunc"
        trunc.write_bytes(good.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            ad.read_checkpoint(trunc)
        with pytest.raises(CheckpointError):
            ad.read_checkpoint(tmp_path / "missing")
