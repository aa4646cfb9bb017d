"""Neural building blocks on top of :mod:`umasplit.autodiff`.

Parameters live in a flat ``dict[str, Tensor]``; each block reads the
entries under its own dotted prefix. ``init_*`` helpers return raw arrays
keyed by those names so a model can assemble one parameter map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


class UtteranceTooShort(ValueError):
    pass


@dataclass(frozen=True)
class EncoderBlockConfig:
    model_dim: int
    heads: int
    ffn_dim: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class FfnSpec:
    in_dim: int
    expansion: int
    out_dim: int
    activation: str = "swish"

    @property
    def hidden_dim(self) -> int:
        return self.in_dim * self.expansion


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def init_linear(rng: np.random.Generator, prefix: str, n_in: int, n_out: int,
                zero: bool = False) -> dict[str, np.ndarray]:
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
    return {f"{prefix}.weight": w, f"{prefix}.bias": np.zeros(n_out)}


def init_layer_norm(prefix: str, dim: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.gain": np.ones(dim), f"{prefix}.bias": np.zeros(dim)}


def init_ffn(rng: np.random.Generator, prefix: str, spec: FfnSpec) -> dict[str, np.ndarray]:
    out = init_linear(rng, f"{prefix}.w1", spec.in_dim, spec.hidden_dim)
    out.update(init_linear(rng, f"{prefix}.w2", spec.hidden_dim, spec.out_dim))
    return out


def init_encoder_block(rng: np.random.Generator, prefix: str,
                       cfg: EncoderBlockConfig) -> dict[str, np.ndarray]:
    d = cfg.model_dim
    out = {}
    out.update(init_layer_norm(f"{prefix}.norm_att", d))
    for name in ("q", "k", "v", "o"):
        out.update(init_linear(rng, f"{prefix}.att.{name}", d, d))
    out.update(init_layer_norm(f"{prefix}.norm_ffn", d))
    out.update(init_ffn(rng, f"{prefix}.ffn", FfnSpec(d, cfg.ffn_dim // d, d)))
    return out


def init_conv_subsample(rng: np.random.Generator, prefix: str, feat_dim: int,
                        channels: int, model_dim: int) -> dict[str, np.ndarray]:
    if feat_dim < 7:
        raise ValueError("feat_dim must be >= 7 for two stride-2 convolutions")
    out = {}
    out.update(init_linear(rng, f"{prefix}.conv1", 9, channels))
    out.update(init_linear(rng, f"{prefix}.conv2", 9 * channels, channels))
    out.update(init_linear(rng, f"{prefix}.out", subsampled_length(feat_dim) * channels, model_dim))
    return out


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def layer_norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def ffn_forward(x: Tensor, params: Params, prefix: str) -> Tensor:
    """y = W2 swish(W1 x + b1) + b2."""
    return linear(ad.swish(linear(x, params, f"{prefix}.w1")), params, f"{prefix}.w2")


def subsampled_length(t: int) -> int:
    """Output length of two kernel-3 stride-2 convolutions without padding."""
    return ((t - 1) // 2 - 1) // 2


def _conv3x3_stride2(x: Tensor, params: Params, prefix: str) -> Tensor:
    # x (B, T, F, C) -> (B, T', F', C'), im2col via strided slices
    _, t, f, _ = x.shape
    t_out, f_out = (t - 1) // 2, (f - 1) // 2
    patches = [
        ad.slice_(x, (slice(None), slice(dt, dt + 2 * t_out - 1, 2), slice(df, df + 2 * f_out - 1, 2)))
        for dt in range(3) for df in range(3)
    ]
    return ad.swish(linear(ad.concat(patches, axis=-1), params, prefix))


def conv_subsample(features: Tensor, params: Params, prefix: str = "subsample") -> Tensor:
    """Downsample (B, T, F) features by 4 in time and project to model_dim.

    Two 3x3 stride-2 convolutions with swish, frequency folded into channels,
    then a linear projection. A 2-D (T, F) input is treated as a batch of one.
    """
    single = features.ndim == 2
    if single:
        features = ad.reshape(features, (1,) + features.shape)
    b, t, f = features.shape
    if t < 7:
        raise UtteranceTooShort("utterance too short for subsampling")
    x = ad.reshape(features, (b, t, f, 1))
    x = _conv3x3_stride2(x, params, f"{prefix}.conv1")
    x = _conv3x3_stride2(x, params, f"{prefix}.conv2")
    _, t2, f2, c = x.shape
    y = linear(ad.reshape(x, (b, t2, f2 * c)), params, f"{prefix}.out")
    return ad.reshape(y, y.shape[1:]) if single else y


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return pe


def add_positions(x: Tensor) -> Tensor:
    return ad.add(x, Tensor(sinusoidal_positions(x.shape[-2], x.shape[-1])))


def self_attention(x: Tensor, params: Params, prefix: str, heads: int,
                   key_mask: np.ndarray | None = None,
                   dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention on (B, N, D).

    ``key_mask`` (B, N) is True at padded positions, which are never attended.
    """
    b, n, d = x.shape
    dh = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(linear(x, params, f"{prefix}.q"))
    k = split_heads(linear(x, params, f"{prefix}.k"))
    v = split_heads(linear(x, params, f"{prefix}.v"))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    if key_mask is not None and key_mask.any():
        scores = ad.masked_fill(scores, key_mask[:, None, None, :], -1e9)
    att = ad.dropout(ad.softmax(scores), dropout, rng)
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
    return linear(ctx, params, f"{prefix}.o")


def encoder_block_forward(x: Tensor, params: Params, prefix: str, cfg: EncoderBlockConfig,
                          key_mask: np.ndarray | None = None,
                          rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm Transformer block; accepts (N, D) or (B, N, D)."""
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.shape[-1] != cfg.model_dim:
        raise ad.ShapeError(f"encoder block expects dim {cfg.model_dim}, got {x.shape[-1]}")
    p = cfg.dropout if rng is not None else 0.0
    h = layer_norm(x, params, f"{prefix}.norm_att")
    h = self_attention(h, params, f"{prefix}.att", cfg.heads, key_mask, p, rng)
    x = ad.add(x, ad.dropout(h, p, rng))
    h = ffn_forward(layer_norm(x, params, f"{prefix}.norm_ffn"), params, f"{prefix}.ffn")
    x = ad.add(x, ad.dropout(h, p, rng))
    return ad.reshape(x, x.shape[1:]) if single else x
