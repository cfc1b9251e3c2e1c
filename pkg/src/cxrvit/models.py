"""Model specifications, presets, forward passes and checkpoints."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal

import numpy as np

from . import nn
from . import tensor as T
from .errors import CheckpointError, ConfigurationError, DimensionError
from .tensor import Tensor

Family = Literal["vit", "deit", "densenet"]

CHECKPOINT_MAGIC = b"DDB1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Declarative architecture description.

    Transformer fields (``depth``, ``embed_dim``, ``heads``, ``mlp_ratio``,
    ``patch_size``) are ignored by densenets and vice versa for
    ``growth_rate``, ``block_config``, ``num_init_features``, ``bn_size`` and
    ``stem``. ``stem="imagenet"`` is the 7x7/2 conv + 3x3/2 max-pool stem;
    ``stem="small"`` is a 3x3/1 conv + 2x2/2 max-pool for desk-scale inputs.
    """

    family: Family
    num_classes: int = 5
    input_shape: tuple[int, int, int] = (3, 224, 224)
    depth: int = 12
    embed_dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    patch_size: int = 16
    growth_rate: int = 32
    block_config: tuple[int, ...] = (6, 12, 24, 16)
    num_init_features: int = 64
    bn_size: int = 4
    stem: Literal["imagenet", "small"] = "imagenet"
    name: str = ""

    def __post_init__(self):
        if self.family not in ("vit", "deit", "densenet"):
            raise ConfigurationError(f"unknown model family {self.family!r}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.is_transformer:
            if self.embed_dim % self.heads:
                raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
            _, h, w = self.input_shape
            if h % self.patch_size or w % self.patch_size:
                raise ConfigurationError(f"input {h}x{w} not divisible by patch size {self.patch_size}")

    @property
    def is_transformer(self) -> bool:
        return self.family in ("vit", "deit")

    @property
    def patch_config(self) -> nn.PatchEmbedConfig:
        c, h, w = self.input_shape
        token_set = "class_and_distillation" if self.family == "deit" else "class_only"
        return nn.PatchEmbedConfig(h, w, c, self.patch_size, self.embed_dim, token_set)

    def replace(self, **changes) -> "ModelSpec":
        data = asdict(self)
        data.update(changes)
        return ModelSpec.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown ModelSpec fields: {sorted(unknown)}")
        data = dict(data)
        for key in ("input_shape", "block_config"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def _vit(name, family, dim, depth, heads, **kw) -> ModelSpec:
    return ModelSpec(family=family, embed_dim=dim, depth=depth, heads=heads, name=name, **kw)


_TINY_INPUT = (3, 32, 32)

PRESETS: dict[str, ModelSpec] = {
    "vit-s": _vit("vit-s", "vit", 384, 12, 6),
    "vit-b": _vit("vit-b", "vit", 768, 12, 12),
    "deit-s": _vit("deit-s", "deit", 384, 12, 6),
    "deit-b": _vit("deit-b", "deit", 768, 12, 12),
    "densenet-121": ModelSpec(family="densenet", block_config=(6, 12, 24, 16), name="densenet-121"),
    "densenet-201": ModelSpec(family="densenet", block_config=(6, 12, 48, 32), name="densenet-201"),
    "vit-tiny": _vit("vit-tiny", "vit", 64, 4, 4, patch_size=8, input_shape=_TINY_INPUT),
    "deit-tiny": _vit("deit-tiny", "deit", 64, 4, 4, patch_size=8, input_shape=_TINY_INPUT),
    "densenet-tiny": ModelSpec(
        family="densenet",
        block_config=(3, 3),
        growth_rate=12,
        num_init_features=16,
        stem="small",
        input_shape=_TINY_INPUT,
        name="densenet-tiny",
    ),
}
PRESETS["cnn-tiny"] = PRESETS["densenet-tiny"].replace(name="cnn-tiny")


def get_spec(name: str, **overrides) -> ModelSpec:
    try:
        spec = PRESETS[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return spec.replace(**overrides) if overrides else spec


@dataclass
class ForwardOutput:
    class_logits: Tensor
    dist_logits: Tensor | None = None
    attention: list[np.ndarray] | None = None
    feature_maps: Tensor | None = None


@dataclass
class Model:
    """A built network: its spec, a parameter tree and a train/eval flag."""

    spec: ModelSpec
    params: dict
    training: bool = True
    seed: int = 0

    # -- parameter access --------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, v) for n, v in nn.flatten_tree(self.params) if isinstance(v, Tensor)]

    def parameters(self) -> list[Tensor]:
        return [v for _, v in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(n, v) for n, v in nn.flatten_tree(self.params) if not isinstance(v, Tensor)]

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by dotted name."""
        return {n: (v.data if isinstance(v, Tensor) else v).copy() for n, v in nn.flatten_tree(self.params)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, leaf in nn.flatten_tree(self.params):
            if name not in state:
                raise CheckpointError(f"state is missing {name!r}")
            arr = state[name]
            target = leaf.data if isinstance(leaf, Tensor) else leaf
            if arr.shape != target.shape:
                raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {target.shape}")
            target[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    # -- forward -----------------------------------------------------------
    def __call__(self, images, capture_attention: bool = False, capture_features: bool = False) -> ForwardOutput:
        return forward(self, images, capture_attention=capture_attention, capture_features=capture_features)

    def features(self, images) -> Tensor:
        """DenseNet trunk: activations after the final norm and ReLU."""
        if self.spec.family != "densenet":
            raise ConfigurationError("feature maps are only defined for densenets")
        x = self._input(images)
        return _densenet_features(x, self.params, self.spec, self.training)

    def classify_features(self, feats: Tensor) -> Tensor:
        pooled = T.mean(feats, axis=(2, 3))
        return nn.linear(pooled, self.params["head"])

    def _input(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=self.dtype)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"input batch {x.shape} does not match model input {self.spec.input_shape}")
        return x


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _build_transformer(init: nn.Init, spec: ModelSpec) -> dict:
    cfg = spec.patch_config
    params = {
        "patch_embed": nn.init_patch_embed(init, cfg),
        "blocks": [nn.init_transformer_block(init, spec.embed_dim, spec.mlp_ratio) for _ in range(spec.depth)],
        "norm": init.layer_norm(spec.embed_dim),
        "head": init.linear(spec.embed_dim, spec.num_classes),
    }
    if spec.family == "deit":
        params["head_dist"] = init.linear(spec.embed_dim, spec.num_classes)
    return params


def _build_densenet(init: nn.Init, spec: ModelSpec) -> dict:
    c_in = spec.input_shape[0]
    k = 7 if spec.stem == "imagenet" else 3
    channels = spec.num_init_features
    params: dict = {"stem": {"conv": init.conv(c_in, channels, k), "norm": init.batch_norm(channels)}}
    blocks, transitions = [], []
    for i, layers in enumerate(spec.block_config):
        blocks.append(nn.init_dense_block(init, channels, layers, spec.growth_rate, spec.bn_size))
        channels += layers * spec.growth_rate
        if i != len(spec.block_config) - 1:
            transitions.append(nn.init_transition(init, channels, channels // 2))
            channels //= 2
    params["blocks"] = blocks
    params["transitions"] = transitions
    params["norm"] = init.batch_norm(channels)
    params["head"] = init.linear(channels, spec.num_classes)
    return params


def build(spec: ModelSpec | str, seed: int = 0, dtype=np.float64, materialize: bool = True) -> Model:
    """Build a model with deterministic initialisation.

    Linear weights, embeddings and tokens use a truncated normal with
    std 0.02, conv weights He-normal, biases zero and norm scales one.
    ``materialize=False`` allocates zero-filled parameters without drawing
    random numbers, which is enough for parameter audits of large presets.
    """
    if isinstance(spec, str):
        spec = get_spec(spec)
    init = nn.Init(seed, dtype=dtype, materialize=materialize)
    params = _build_transformer(init, spec) if spec.is_transformer else _build_densenet(init, spec)
    return Model(spec=spec, params=params, seed=seed)


def parameter_count(model: Model) -> int:
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _densenet_features(x: Tensor, params: dict, spec: ModelSpec, training: bool) -> Tensor:
    stem = params["stem"]
    if spec.stem == "imagenet":
        x = T.conv2d(x, stem["conv"]["weight"], stride=2, pad=3)
        x = T.relu(nn.batch_norm(x, stem["norm"], training))
        x = T.pool(x, "max", 3, 2, pad=1)
    else:
        x = T.conv2d(x, stem["conv"]["weight"], stride=1, pad=1)
        x = T.relu(nn.batch_norm(x, stem["norm"], training))
        x = T.pool(x, "max", 2, 2)
    for i, block in enumerate(params["blocks"]):
        x = nn.dense_block(x, block, training)
        if i < len(params["transitions"]):
            x = nn.transition(x, params["transitions"][i], training)
    return T.relu(nn.batch_norm(x, params["norm"], training))


def forward(model: Model, images, capture_attention: bool = False, capture_features: bool = False) -> ForwardOutput:
    """Raw logits (no sigmoid) for a ``B x C x H x W`` batch."""
    spec = model.spec
    x = model._input(images)
    if spec.family == "densenet":
        feats = _densenet_features(x, model.params, spec, model.training)
        logits = model.classify_features(feats)
        return ForwardOutput(class_logits=logits, feature_maps=feats if capture_features else None)

    p = model.params
    seq = nn.embed_sequence(nn.patchify(x, spec.patch_size), spec.patch_config, p["patch_embed"])
    records = []
    for block in p["blocks"]:
        seq, weights = nn.transformer_block(seq, spec.heads, block)
        if capture_attention:
            records.append(weights)
    seq = nn.layer_norm(seq, p["norm"])
    out = ForwardOutput(class_logits=nn.linear(seq[:, 0], p["head"]), attention=records if capture_attention else None)
    if spec.family == "deit":
        out.dist_logits = nn.linear(seq[:, 1], p["head_dist"])
    return out


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode logits for a whole array, batched, without graph recording."""
    was_training = model.training
    model.eval()
    cls_out, dist_out = [], []
    try:
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                out = forward(model, images[start : start + batch_size])
                cls_out.append(out.class_logits.data)
                if out.dist_logits is not None:
                    dist_out.append(out.dist_logits.data)
    finally:
        model.training = was_training
    return np.concatenate(cls_out), (np.concatenate(dist_out) if dist_out else None)


def clone(model: Model) -> Model:
    return copy.deepcopy(model)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save(model: Model, path, extra: dict | None = None) -> Path:
    """Write ``DDB1`` + u32 manifest length + UTF-8 JSON manifest + LE payloads."""
    path = Path(path)
    entries, payloads = [], []
    for name, leaf in nn.flatten_tree(model.params):
        arr = leaf.data if isinstance(leaf, Tensor) else leaf
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "trainable": isinstance(leaf, Tensor)}
        )
        payloads.append(np.ascontiguousarray(le).tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "tensors": entries,
        "extra": extra or {},
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for blob in payloads:
            fh.write(blob)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its manifest and named arrays."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {manifest.get('version')!r}")
    arrays = {}
    offset = 8 + n
    for entry in manifest["tensors"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: payload for {entry['name']!r} is truncated")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return manifest, arrays


def load(path, spec: ModelSpec | None = None) -> Model:
    """Rebuild a model from a checkpoint.

    When ``spec`` is given it must equal the stored spec.
    """
    manifest, arrays = read_checkpoint(path)
    try:
        stored = ModelSpec.from_dict(manifest["spec"])
    except (ConfigurationError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid spec ({exc})") from exc
    if spec is not None and spec != stored:
        raise CheckpointError(f"{path}: checkpoint spec {stored.name or stored.family} does not match requested spec")
    dtypes = {e["dtype"] for e in manifest["tensors"] if e["trainable"]}
    model = build(stored, seed=manifest.get("seed", 0), dtype=dtypes.pop() if len(dtypes) == 1 else np.float64,
                  materialize=False)
    expected = dict(nn.flatten_tree(model.params))
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        leaf = expected[name]
        target = leaf.data if isinstance(leaf, Tensor) else leaf
        if tuple(entry["shape"]) != target.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: {entry['shape']} vs {list(target.shape)}")
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:3]}")
    model.load_state(arrays)
    model.eval()
    return model
