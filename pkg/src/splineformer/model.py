"""Image-to-spline model: tip predictor, autoregressive token decoder and spline assembly.

Token ``i`` is ``(P_i, t_i, s_i)``: a control point, the ``i``-th entry of the
clamped knot vector and the probability that the sequence ends at ``i``. The
decoder reads tokens ``0..j`` at position ``j`` and emits ``s_j`` together with
the point and knot of token ``j + 1``; token 0 comes from the tip predictor.
Decoder inputs are always padded to ``max_seq_len`` so teacher-forced and
generated passes run on identical shapes.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Tensor
from .bspline import DEFAULT_DEGREE, SplineCurve
from .errors import CheckpointError, DomainError, ShapeError
from .transformer import ModelConfig

TIP_CHANNELS = (8, 16, 32)
TIP_HIDDEN = 64
IMAGE_MEAN, IMAGE_SCALE = 0.5, 4.0
EOS_EPS = 1e-7
KNOT_MARGIN = 1e-6


@dataclass
class SplineToken:
    point: np.ndarray
    knot: float
    eos_prob: float


@dataclass(eq=False)
class TokenSequence:
    points: np.ndarray
    knots: np.ndarray
    eos_probs: np.ndarray
    terminated: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.knots = np.asarray(self.knots, dtype=np.float64).ravel()
        self.eos_probs = np.asarray(self.eos_probs, dtype=np.float64).ravel()
        n = len(self.points)
        if n < 1 or len(self.knots) != n or len(self.eos_probs) != n:
            raise ShapeError("token sequence needs matching, non-empty points, knots and eos_probs")

    def __len__(self):
        return len(self.points)

    @property
    def tokens(self):
        return [SplineToken(p, float(t), float(s)) for p, t, s in zip(self.points, self.knots, self.eos_probs)]

    def as_inputs(self):
        """``(L, 3)`` array of ``(x, y, t)`` decoder inputs."""
        return np.column_stack([self.points, self.knots])

    @classmethod
    def from_curve(cls, curve):
        """Training target: one token per control point, eos flag on the last."""
        n = curve.n_ctrl
        eos = np.zeros(n)
        eos[-1] = 1.0
        return cls(curve.control_points, curve.knots[:n], eos, True)

    def to_dict(self):
        return {"points": self.points.tolist(), "knots": self.knots.tolist(),
                "eos_probs": self.eos_probs.tolist(), "terminated": bool(self.terminated)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["points"], d["knots"], d["eos_probs"], d.get("terminated", True))


def to_spline(seq, degree=DEFAULT_DEGREE):
    """Clamped spline from a token sequence.

    Knots are made non-decreasing by a running maximum, interior knots are
    clipped into ``[KNOT_MARGIN, 1 - KNOT_MARGIN]``, the first ``degree + 1``
    are set to 0 and ``degree + 1`` ones are appended. Points are clipped to
    the unit square.
    """
    if len(seq) < degree + 1:
        raise DomainError("insufficient control points")
    points = np.clip(np.nan_to_num(seq.points, nan=0.5), 0.0, 1.0)
    return SplineCurve(degree, points, assemble_knots(seq.knots, degree))


def assemble_knots(token_knots, degree=DEFAULT_DEGREE):
    """Full clamped knot vector from the per-token knots (see :func:`to_spline`)."""
    t = np.maximum.accumulate(np.nan_to_num(np.asarray(token_knots, dtype=np.float64),
                                            nan=0.0, posinf=1.0, neginf=0.0))
    interior = np.clip(t[degree + 1:], KNOT_MARGIN, 1.0 - KNOT_MARGIN)
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


@dataclass
class Prediction:
    """Differentiable teacher-forced outputs, shaped ``(B, S, 2)``, ``(B, S)``, ``(B, S)``."""
    points: Tensor
    knots: Tensor
    eos: Tensor
    lengths: np.ndarray

    def sequences(self):
        return [TokenSequence(self.points.data[b, :n], self.knots.data[b, :n], self.eos.data[b, :n])
                for b, n in enumerate(self.lengths)]


def _tip_grid(size):
    for _ in TIP_CHANNELS:
        size = (size + 1) // 2
    return size


def init_params(config, seed=0):
    rng = np.random.default_rng(seed)
    E, P = config.embed_dim, config.patch_size
    params = {}
    tf.init_linear(params, rng, "patch", P * P, E)
    tf.init_linear(params, rng, "tok", 3, E)
    tf.init_encoder(params, rng, config)
    tf.init_decoder(params, rng, config)
    tf.init_linear(params, rng, "head.point", E, 2)
    tf.init_linear(params, rng, "head.knot", E, 1)
    tf.init_linear(params, rng, "head.eos", E, 1)
    params["head.point.b"][:] = 0.5
    params["head.knot.b"][:] = 0.5
    params["head.eos.b"][:] = -2.0
    c_in = 1
    for i, c in enumerate(TIP_CHANNELS):
        params[f"tip.conv{i}.w"] = tf.glorot(rng, 9 * c_in, 9 * c, (c, c_in, 3, 3))
        params[f"tip.conv{i}.b"] = np.zeros(c)
        c_in = c
    tf.init_linear(params, rng, "tip.fc1", c_in * _tip_grid(config.image_size) ** 2, TIP_HIDDEN)
    tf.init_linear(params, rng, "tip.fc2", TIP_HIDDEN, 3)
    params["tip.fc2.b"][:] = [0.5, 0.5, 0.0]
    return params


class SplineFormer:
    def __init__(self, config=None, params=None, seed=0, dtype=np.float64):
        self.config = config or ModelConfig()
        if params is None:
            params = init_params(self.config, seed)
        self.params = {k: Tensor(np.asarray(v, dtype=dtype), name=k) for k, v in params.items()}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    def state_dict(self):
        return {k: p.data for k, p in self.params.items()}

    def astype(self, dtype):
        return SplineFormer(self.config, self.state_dict(), dtype=dtype)

    def _images(self, images):
        images = np.asarray(images, dtype=self.dtype)
        single = images.ndim == 2
        if single:
            images = images[None]
        s = self.config.image_size
        if images.ndim != 3 or images.shape[1:] != (s, s):
            raise ShapeError(f"expected {s}x{s} images, got shape {images.shape}")
        return (images - IMAGE_MEAN) * IMAGE_SCALE, single

    # building blocks, all on normalised (B, H, W) images ----------------------

    def encode(self, x, train=False, seed=0):
        cfg = self.config
        patches = Tensor(tf.patchify(x, cfg.patch_size))
        pe = tf.positional_encoding(cfg.n_patches, cfg.embed_dim).astype(self.dtype)
        h = tf.linear(patches, self.params, "patch") + pe
        return tf.encoder_forward(h, self.params, cfg, train, seed)

    def tip(self, x):
        h = Tensor(x[:, None])
        for i in range(len(TIP_CHANNELS)):
            h = ad.relu(ad.conv2d(h, self.params[f"tip.conv{i}.w"], self.params[f"tip.conv{i}.b"], 2, 1))
        h = h.reshape(h.shape[0], -1)
        h = ad.relu(tf.linear(h, self.params, "tip.fc1"))
        return tf.linear(h, self.params, "tip.fc2")

    def decode(self, tokens, memory, train=False, seed=0):
        """Decoder over ``(B, S, 3)`` inputs; returns point ``(B,S,2)``, knot ``(B,S)``, eos ``(B,S)``."""
        cfg = self.config
        pe = tf.positional_encoding(cfg.max_seq_len, cfg.embed_dim).astype(self.dtype)
        y = tf.linear(Tensor(np.asarray(tokens, dtype=self.dtype)), self.params, "tok") + pe
        y, _ = tf.decoder_forward(y, memory, self.params, cfg, train, seed)
        points = tf.linear(y, self.params, "head.point")
        knots = tf.linear(y, self.params, "head.knot")[..., 0]
        eos = ad.clip(ad.sigmoid(tf.linear(y, self.params, "head.eos")[..., 0]), EOS_EPS, 1.0 - EOS_EPS)
        return points, knots, eos

    # public operations --------------------------------------------------------

    def predict_tip(self, image):
        """Token 0 for one image: clipped ``(P_0, t_0)`` with eos probability 0."""
        x, single = self._images(image)
        if not single:
            raise ShapeError("predict_tip takes a single image")
        with ad.no_grad():
            out = np.clip(self.tip(x).data[0], 0.0, 1.0)
        return SplineToken(out[:2].astype(np.float64), float(out[2]), 0.0)

    def teacher_forced_forward(self, images, targets, train=False, seed=0):
        """One decoder pass over the ground-truth prefixes.

        In eval mode the tip output is clipped exactly as during generation;
        in training it stays raw so its gradient never vanishes.
        """
        x, single = self._images(images)
        if isinstance(targets, TokenSequence):
            targets = [targets]
        if len(targets) != len(x):
            raise ShapeError(f"{len(x)} images but {len(targets)} target sequences")
        S = self.config.max_seq_len
        lengths = np.array([len(t) for t in targets])
        if lengths.max() > S:
            raise ShapeError(f"target length {lengths.max()} exceeds max_seq_len {S}")
        inputs = np.zeros((len(x), S, 3))
        for b, t in enumerate(targets):
            inputs[b, :len(t)] = t.as_inputs()
        memory, _ = self.encode(x, train, seed)
        points, knots, eos = self.decode(inputs, memory, train, seed)
        tip = self.tip(x)
        if not train:
            tip = ad.clip(tip, 0.0, 1.0)
        points = ad.concat([tip[:, None, :2], points[:, :S - 1]], axis=1)
        knots = ad.concat([tip[:, 2:3], knots[:, :S - 1]], axis=1)
        return Prediction(points, knots, eos, lengths)

    def generate(self, images, max_len=None, eos_threshold=0.5):
        """Greedy autoregressive decoding; one TokenSequence per image (or one for a single image)."""
        x, single = self._images(images)
        S = self.config.max_seq_len
        max_len = S if max_len is None else max_len
        if not 1 <= max_len <= S:
            raise DomainError(f"max_len must lie in [1, {S}], got {max_len}")
        B = len(x)
        with ad.no_grad():
            memory, _ = self.encode(x)
            tokens = np.zeros((B, S, 3), dtype=self.dtype)
            tokens[:, 0] = np.clip(self.tip(x).data, 0.0, 1.0)
            eos = np.zeros((B, S))
            lengths = np.zeros(B, dtype=int)
            terminated = np.zeros(B, dtype=bool)
            active = np.ones(B, dtype=bool)
            for k in range(max_len):
                points, knots, probs = self.decode(tokens, memory)
                for b in np.flatnonzero(active):
                    eos[b, k] = probs.data[b, k]
                    if eos[b, k] > eos_threshold or k + 1 == max_len:
                        lengths[b] = k + 1
                        terminated[b] = eos[b, k] > eos_threshold
                        active[b] = False
                    else:
                        tokens[b, k + 1, :2] = points.data[b, k]
                        tokens[b, k + 1, 2] = knots.data[b, k]
                if not active.any():
                    break
        seqs = [TokenSequence(tokens[b, :n, :2], tokens[b, :n, 2], eos[b, :n], bool(terminated[b]))
                for b, n in enumerate(lengths)]
        return seqs[0] if single else seqs

    def attention_map(self, image, discard=0.0):
        """Heat map from the last encoder layer, heads fused by elementwise maximum.

        Attention received by each patch is averaged over queries, the lowest
        ``discard`` fraction of patches is zeroed, the rest is scaled to a
        maximum of 1 and each patch value is repeated over its pixels.
        """
        if not 0.0 <= discard < 1.0:
            raise DomainError(f"discard must lie in [0, 1), got {discard}")
        x, single = self._images(image)
        if not single:
            raise ShapeError("attention_map takes a single image")
        with ad.no_grad():
            _, maps = self.encode(x)
        return fuse_attention(maps[-1][0], self.config, discard)

    # persistence ------------------------------------------------------------

    def save(self, path, **header):
        header = dict(header, config=self.config.to_dict())
        ad.write_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path, dtype=np.float32):
        header, tensors = ad.read_checkpoint(path)
        if "config" not in header:
            raise CheckpointError(f"{path}: header has no model config")
        config = ModelConfig.from_dict(header["config"])
        expected = init_params(config)
        missing = set(expected) - set(tensors)
        if missing:
            raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:3]}")
        for k, v in expected.items():
            if tensors[k].shape != v.shape:
                raise CheckpointError(f"{path}: tensor {k!r} has shape {tensors[k].shape}, expected {v.shape}")
        model = cls(config, {k: tensors[k] for k in expected}, dtype=dtype)
        return model, header


def fuse_attention(probs, config, discard=0.0):
    """Fuse ``(heads, queries, keys)`` encoder attention into an image-sized map in [0, 1]."""
    received = probs.mean(axis=1)
    fused = received.max(axis=0)
    n_zero = int(np.ceil(discard * fused.size))
    if n_zero:
        fused = fused.copy()
        fused[np.argsort(fused, kind="stable")[:n_zero]] = 0.0
    top = fused.max()
    if top > 0:
        fused = fused / top
    g = config.image_size // config.patch_size
    return np.kron(fused.reshape(g, g), np.ones((config.patch_size, config.patch_size)))
