"""Functional neural-network blocks.

Parameters live in plain nested dicts of :class:`~cxrvit.tensor.Tensor`
(trainable) and ``numpy`` arrays (non-trainable buffers such as batch-norm
running statistics). Every block takes its parameter dict explicitly, so the
same functions serve model forward passes, tests, and hand-built oracles.

Patch order is row-major over the patch grid; each patch is flattened
channel-major as ``(c, row, col)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

TokenSet = Literal["class_only", "class_and_distillation"]


# ---------------------------------------------------------------------------
# Initialisers
# ---------------------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Init:
    """Creates parameters; ``materialize=False`` skips random draws (shape only)."""

    def __init__(self, seed: int = 0, dtype=np.float64, materialize: bool = True):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.materialize = materialize

    def _param(self, arr: np.ndarray) -> Tensor:
        return Tensor(arr, requires_grad=True, dtype=self.dtype)

    def zeros(self, shape) -> Tensor:
        return self._param(np.zeros(shape, dtype=self.dtype))

    def ones(self, shape) -> Tensor:
        return self._param(np.ones(shape, dtype=self.dtype))

    def normal(self, shape, std: float = 0.02) -> Tensor:
        if not self.materialize:
            return self.zeros(shape)
        return self._param(trunc_normal(self.rng, shape, std, self.dtype))

    def kaiming(self, shape) -> Tensor:
        if not self.materialize:
            return self.zeros(shape)
        fan_in = int(np.prod(shape[1:]))
        return self._param(self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(self.dtype))

    def linear(self, fan_in: int, fan_out: int, bias: bool = True) -> dict:
        p = {"weight": self.normal((fan_in, fan_out))}
        if bias:
            p["bias"] = self.zeros((fan_out,))
        return p

    def layer_norm(self, dim: int) -> dict:
        return {"weight": self.ones((dim,)), "bias": self.zeros((dim,))}

    def batch_norm(self, channels: int) -> dict:
        return {
            "weight": self.ones((channels,)),
            "bias": self.zeros((channels,)),
            "running_mean": np.zeros(channels, dtype=self.dtype),
            "running_var": np.ones(channels, dtype=self.dtype),
        }

    def conv(self, c_in: int, c_out: int, k: int) -> dict:
        return {"weight": self.kaiming((c_out, c_in, k, k))}


# ---------------------------------------------------------------------------
# Basic layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, p: dict) -> Tensor:
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, -1))
    y = T.matmul(x, p["weight"])
    if "bias" in p:
        y = y + p["bias"]
    return T.reshape(y, (-1,)) if squeeze else y


def layer_norm(x: Tensor, p: dict, eps: float = 1e-6) -> Tensor:
    return T.layer_norm(x, p["weight"], p["bias"], eps)


def batch_norm(x: Tensor, p: dict, training: bool) -> Tensor:
    return T.batch_norm(x, p["weight"], p["bias"], p["running_mean"], p["running_var"], training=training)


def mlp(x: Tensor, p: dict) -> Tensor:
    return linear(T.gelu(linear(x, p["fc1"])), p["fc2"])


# ---------------------------------------------------------------------------
# Patch embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchEmbedConfig:
    image_height: int
    image_width: int
    channels: int
    patch_size: int
    embed_dim: int
    token_set: TokenSet = "class_only"

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigurationError(
                f"image {self.image_height}x{self.image_width} not divisible by patch size {self.patch_size}"
            )
        if self.token_set not in ("class_only", "class_and_distillation"):
            raise ConfigurationError(f"unknown token set {self.token_set!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def num_tokens(self) -> int:
        return 2 if self.token_set == "class_and_distillation" else 1

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.num_tokens

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(image, patch_size: int) -> Tensor:
    """Cut ``C x H x W`` (or ``B x C x H x W``) into ``N x (P*P*C)`` rows."""
    x = T.as_tensor(image)
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise DimensionError(f"patchify expects C x H x W or B x C x H x W, got {x.shape}")
        x = T.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = T.reshape(x, (b, c, gh, p, gw, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, gh * gw, c * p * p))
    return x if batched else T.reshape(x, x.shape[1:])


def unpatchify(patches, channels: int, height: int, width: int, patch_size: int) -> Tensor:
    x = T.as_tensor(patches)
    batched = x.ndim == 3
    if not batched:
        x = T.reshape(x, (1,) + x.shape)
    p = patch_size
    gh, gw = height // p, width // p
    b = x.shape[0]
    x = T.reshape(x, (b, gh, gw, channels, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    x = T.reshape(x, (b, channels, height, width))
    return x if batched else T.reshape(x, x.shape[1:])


def init_patch_embed(init: Init, cfg: PatchEmbedConfig) -> dict:
    p = {
        "proj": init.linear(cfg.patch_dim, cfg.embed_dim),
        "cls_token": init.normal((cfg.embed_dim,)),
    }
    if cfg.token_set == "class_and_distillation":
        p["dist_token"] = init.normal((cfg.embed_dim,))
    p["pos_embed"] = init.normal((cfg.seq_len, cfg.embed_dim))
    return p


def embed_sequence(patches: Tensor, cfg: PatchEmbedConfig, params: dict) -> Tensor:
    """Project patches, prepend class (and distillation) tokens, add positions.

    Accepts ``N x (P*P*C)`` or batched ``B x N x (P*P*C)``; returns ``T x D``
    or ``B x T x D``.
    """
    patches = T.as_tensor(patches)
    batched = patches.ndim == 3
    if not batched:
        patches = T.reshape(patches, (1,) + patches.shape)
    b = patches.shape[0]
    d = cfg.embed_dim
    has_dist = "dist_token" in params
    if has_dist != (cfg.token_set == "class_and_distillation"):
        raise ConfigurationError(f"token set {cfg.token_set!r} does not match supplied token parameters")
    pos = params["pos_embed"]
    if pos.shape[0] != patches.shape[1] + cfg.num_tokens:
        raise ConfigurationError(
            f"position table has {pos.shape[0]} rows, sequence needs {patches.shape[1] + cfg.num_tokens}"
        )
    x = linear(patches, params["proj"])
    tokens = [T.broadcast_to(T.reshape(params["cls_token"], (1, 1, d)), (b, 1, d))]
    if has_dist:
        tokens.append(T.broadcast_to(T.reshape(params["dist_token"], (1, 1, d)), (b, 1, d)))
    x = T.concat(tokens + [x], axis=1) + pos
    return x if batched else T.reshape(x, x.shape[1:])


# ---------------------------------------------------------------------------
# Attention and transformer blocks
# ---------------------------------------------------------------------------


def init_mhsa(init: Init, dim: int) -> dict:
    return {"qkv": init.linear(dim, 3 * dim), "proj": init.linear(dim, dim)}


def mhsa(x: Tensor, heads: int, params: dict) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product self-attention.

    Returns the projected output and the attention weights with shape
    ``heads x T x T`` (``B x heads x T x T`` for batched input).
    """
    batched = x.ndim == 3
    if not batched:
        x = T.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    if d % heads:
        raise ConfigurationError(f"embedding dim {d} not divisible by {heads} heads")
    hd = d // heads
    qkv = linear(x, params["qkv"])
    qkv = T.transpose(T.reshape(qkv, (b, t, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, d))
    out = linear(out, params["proj"])
    weights = attn.data
    if not batched:
        return T.reshape(out, (t, d)), weights[0]
    return out, weights


def init_transformer_block(init: Init, dim: int, mlp_ratio: float) -> dict:
    hidden = int(dim * mlp_ratio)
    return {
        "norm1": init.layer_norm(dim),
        "attn": init_mhsa(init, dim),
        "norm2": init.layer_norm(dim),
        "mlp": {"fc1": init.linear(dim, hidden), "fc2": init.linear(hidden, dim)},
    }


def transformer_block(x: Tensor, heads: int, params: dict, eps: float = 1e-6) -> tuple[Tensor, np.ndarray]:
    """Pre-norm block: ``x + mhsa(LN(x))`` then ``x + MLP(LN(x))``."""
    a, weights = mhsa(layer_norm(x, params["norm1"], eps), heads, params["attn"])
    x = x + a
    x = x + mlp(layer_norm(x, params["norm2"], eps), params["mlp"])
    return x, weights


# ---------------------------------------------------------------------------
# Dense convolutional blocks
# ---------------------------------------------------------------------------


def init_dense_layer(init: Init, c_in: int, growth: int, bn_size: int) -> dict:
    mid = bn_size * growth
    return {
        "norm1": init.batch_norm(c_in),
        "conv1": init.conv(c_in, mid, 1),
        "norm2": init.batch_norm(mid),
        "conv2": init.conv(mid, growth, 3),
    }


def dense_layer(x: Tensor, p: dict, training: bool) -> Tensor:
    """BN -> ReLU -> 1x1 conv -> BN -> ReLU -> 3x3 conv; yields ``growth`` channels."""
    h = T.conv2d(T.relu(batch_norm(x, p["norm1"], training)), p["conv1"]["weight"])
    return T.conv2d(T.relu(batch_norm(h, p["norm2"], training)), p["conv2"]["weight"], pad=1)


def init_dense_block(init: Init, c_in: int, layers: int, growth: int, bn_size: int = 4) -> list:
    return [init_dense_layer(init, c_in + i * growth, growth, bn_size) for i in range(layers)]


def dense_block(x: Tensor, params: list, training: bool = True) -> Tensor:
    """Each layer sees the concatenation of the input and all earlier outputs."""
    features = [x]
    for p in params:
        inp = features[0] if len(features) == 1 else T.concat(features, axis=1)
        features.append(dense_layer(inp, p, training))
    return features[0] if len(features) == 1 else T.concat(features, axis=1)


def init_transition(init: Init, c_in: int, c_out: int) -> dict:
    return {"norm": init.batch_norm(c_in), "conv": init.conv(c_in, c_out, 1)}


def transition(x: Tensor, p: dict, training: bool) -> Tensor:
    h = T.conv2d(T.relu(batch_norm(x, p["norm"], training)), p["conv"]["weight"])
    return T.pool(h, "avg", 2, 2)


# ---------------------------------------------------------------------------
# Parameter trees
# ---------------------------------------------------------------------------


def flatten_tree(tree, prefix: str = "") -> list[tuple[str, object]]:
    """Ordered ``(dotted_name, leaf)`` pairs; leaves are Tensors or ndarrays."""
    out: list[tuple[str, object]] = []
    if isinstance(tree, dict):
        items = tree.items()
    elif isinstance(tree, (list, tuple)):
        items = ((str(i), v) for i, v in enumerate(tree))
    else:
        return [(prefix, tree)]
    for key, value in items:
        name = f"{prefix}.{key}" if prefix else str(key)
        out.extend(flatten_tree(value, name))
    return out
