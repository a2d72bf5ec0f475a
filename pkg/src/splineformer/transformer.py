"""Encoder/decoder building blocks on top of the autodiff tensors.

Weights live in a flat ``{name: Tensor}`` dict; every block takes that dict and
a name prefix. Activations are shaped ``(..., S, E)``.
"""

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 4
    n_decoder_layers: int = 4
    ffn_hidden: int = 256
    dropout_rate: float = 0.1
    max_seq_len: int = 24

    def __post_init__(self):
        counts = ("image_size", "patch_size", "embed_dim", "n_heads",
                  "n_encoder_layers", "n_decoder_layers", "ffn_hidden", "max_seq_len")
        for name in counts:
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be at least 1")
        if self.image_size % self.patch_size:
            raise ShapeError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.n_heads:
            raise ShapeError(f"embed dim {self.embed_dim} not divisible by {self.n_heads} heads")
        if self.embed_dim % 2:
            raise ShapeError("embed dim must be even for sinusoidal encodings")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DomainError("dropout rate must lie in [0, 1)")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self):
        return self.embed_dim // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DomainError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


PRESETS = {
    "toy": ModelConfig(),
    "tiny": ModelConfig(image_size=16, patch_size=4, embed_dim=8, n_heads=2, n_encoder_layers=1,
                        n_decoder_layers=1, ffn_hidden=16, dropout_rate=0.0, max_seq_len=6),
}


def patchify(image, patch_size):
    """Split ``(..., H, W)`` images into ``(..., N_P, P*P)`` row-major patch vectors."""
    image = np.asarray(image)
    *lead, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    x = image.reshape(*lead, h // p, p, w // p, p)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, (h // p) * (w // p), p * p)


def positional_encoding(length, dim):
    """Sinusoidal table: ``pe[k, 2j] = sin(k w_j)``, ``pe[k, 2j+1] = cos(k w_j)``, ``w_j = 10000^(-2j/dim)``."""
    if dim % 2:
        raise ShapeError(f"positional encoding dim must be even, got {dim}")
    pos = np.arange(length)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def causal_mask(length):
    """Additive mask: 0 on and below the diagonal, ``-inf`` above."""
    return np.triu(np.full((length, length), -np.inf), k=1)


def linear(x, params, prefix):
    y = ad.matmul(x, params[prefix + ".w"])
    b = params.get(prefix + ".b")
    return y if b is None else y + b


def attention(q, k, v, mask=None):
    """Scaled dot-product attention; returns the output and the probabilities."""
    d_k = q.shape[-1]
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[-2:] != scores.shape[-2:]:
            raise ShapeError(f"mask shape {mask.shape} does not match scores {scores.shape}")
        scores = scores + mask.astype(scores.dtype)
    probs = ad.softmax(scores, axis=-1)
    return ad.matmul(probs, v), probs


def _split_heads(x, n_heads):
    *lead, s, e = x.shape
    return ad.swapaxes(x.reshape(*lead, s, n_heads, e // n_heads), -3, -2)


def _merge_heads(x):
    x = ad.swapaxes(x, -3, -2)
    *lead, s, h, d = x.shape
    return x.reshape(*lead, s, h * d)


def mha(query, key_value, params, prefix, n_heads, mask=None):
    """Multi-head attention; returns the projected output and probabilities ``(..., H, Sq, Sk)``.

    The key projection carries no bias.
    """
    if query.shape[-1] % n_heads:
        raise ShapeError(f"embed dim {query.shape[-1]} not divisible by {n_heads} heads")
    q = _split_heads(linear(query, params, prefix + ".q"), n_heads)
    k = _split_heads(linear(key_value, params, prefix + ".k"), n_heads)
    v = _split_heads(linear(key_value, params, prefix + ".v"), n_heads)
    out, probs = attention(q, k, v, mask)
    return linear(_merge_heads(out), params, prefix + ".o"), probs.data


def ffn(x, params, prefix, rate=0.0, train=False, seed=0, site=0):
    h = ad.gelu(linear(x, params, prefix + ".fc1"))
    h = ad.dropout(h, rate, train, seed, site)
    return linear(h, params, prefix + ".fc2")


def sublayer(x, f, params=None, prefix=None):
    """``LayerNorm(x + f(x))`` with the affine weights ``prefix.g``/``prefix.b`` when given."""
    fx = f(x)
    if fx.shape != x.shape:
        raise ShapeError(f"sublayer function changed shape {x.shape} -> {fx.shape}")
    if params is None:
        return ad.layernorm(x + fx)
    return ad.layernorm(x + fx, params[prefix + ".g"], params[prefix + ".b"])


def encoder_forward(x, params, config, train=False, seed=0, n_layers=None):
    """Self-attention + FFN stack; returns the memory and per-layer attention probabilities."""
    n_layers = config.n_encoder_layers if n_layers is None else n_layers
    maps = []
    for layer in range(n_layers):
        p = f"enc.{layer}"

        def attn(h):
            out, probs = mha(h, h, params, p + ".attn", config.n_heads)
            maps.append(probs)
            return out
        x = sublayer(x, attn, params, p + ".ln1")
        x = sublayer(x, lambda h: ffn(h, params, p + ".ffn", config.dropout_rate, train, seed, layer),
                     params, p + ".ln2")
    return x, maps


def decoder_forward(y, memory, params, config, train=False, seed=0, n_layers=None):
    """Masked self-attention, cross-attention and FFN per layer; returns output and attention maps."""
    n_layers = config.n_decoder_layers if n_layers is None else n_layers
    mask = causal_mask(y.shape[-2])
    maps = []
    for layer in range(n_layers):
        p = f"dec.{layer}"
        layer_maps = {}

        def self_attn(h):
            out, layer_maps["self"] = mha(h, h, params, p + ".self", config.n_heads, mask)
            return out

        def cross_attn(h):
            out, layer_maps["cross"] = mha(h, memory, params, p + ".cross", config.n_heads)
            return out
        y = sublayer(y, self_attn, params, p + ".ln1")
        y = sublayer(y, cross_attn, params, p + ".ln2")
        y = sublayer(y, lambda h: ffn(h, params, p + ".ffn", config.dropout_rate, train, seed, 1000 + layer),
                     params, p + ".ln3")
        maps.append(layer_maps)
    return y, maps


# initialisation -----------------------------------------------------------

def glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


def init_linear(params, rng, prefix, n_in, n_out):
    params[prefix + ".w"] = glorot(rng, n_in, n_out)
    params[prefix + ".b"] = np.zeros(n_out)


def init_layernorm(params, prefix, dim):
    params[prefix + ".g"] = np.ones(dim)
    params[prefix + ".b"] = np.zeros(dim)


def init_mha(params, rng, prefix, dim):
    for name in "qkvo":
        init_linear(params, rng, f"{prefix}.{name}", dim, dim)
    # softmax is shift invariant per row, so a key bias always has zero gradient
    del params[prefix + ".k.b"]


def init_ffn(params, rng, prefix, dim, hidden):
    init_linear(params, rng, prefix + ".fc1", dim, hidden)
    init_linear(params, rng, prefix + ".fc2", hidden, dim)


def init_encoder(params, rng, config):
    for layer in range(config.n_encoder_layers):
        p = f"enc.{layer}"
        init_mha(params, rng, p + ".attn", config.embed_dim)
        init_layernorm(params, p + ".ln1", config.embed_dim)
        init_ffn(params, rng, p + ".ffn", config.embed_dim, config.ffn_hidden)
        init_layernorm(params, p + ".ln2", config.embed_dim)


def init_decoder(params, rng, config):
    for layer in range(config.n_decoder_layers):
        p = f"dec.{layer}"
        init_mha(params, rng, p + ".self", config.embed_dim)
        init_layernorm(params, p + ".ln1", config.embed_dim)
        init_mha(params, rng, p + ".cross", config.embed_dim)
        init_layernorm(params, p + ".ln2", config.embed_dim)
        init_ffn(params, rng, p + ".ffn", config.embed_dim, config.ffn_hidden)
        init_layernorm(params, p + ".ln3", config.embed_dim)
