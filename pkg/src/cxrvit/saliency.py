"""Saliency maps: last-layer class-token attention and Grad-CAM."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as T
from .data import read_pgm, resize, write_pgm
from .errors import ConfigurationError, ContractError
from .models import Model
from .nn import PatchEmbedConfig
from .tensor import Tensor


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: Literal["attention", "grad_cam"]
    source_layer: str
    target_class: int | None = None
    raw: np.ndarray | None = None  # before min-max normalisation


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all ones unless it is all zero."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == 0 and lo == 0:
        return np.zeros_like(values)
    if hi - lo <= 1e-12 * max(abs(hi), 1.0):
        return np.ones_like(values)
    return (values - lo) / (hi - lo)


def attention_map(attention: np.ndarray, cfg: PatchEmbedConfig, query: str = "class") -> SaliencyMap:
    """Map the class-token attention of one layer onto the image grid.

    ``attention`` is ``heads x T x T`` for a single image. Heads are
    averaged, the token columns are dropped, the patch weights are laid out
    on the patch grid row-major and bilinearly resized to the image size.
    ``query="distillation"`` uses the distillation-token row instead.
    """
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim != 3 or att.shape[1] != att.shape[2]:
        raise ContractError(f"attention record must be heads x T x T, got {att.shape}")
    if att.shape[-1] != cfg.seq_len:
        raise ContractError(f"attention sequence length {att.shape[-1]} does not match config length {cfg.seq_len}")
    if query == "class":
        row = 0
    elif query == "distillation":
        if cfg.token_set != "class_and_distillation":
            raise ContractError("config has no distillation token")
        row = 1
    else:
        raise ConfigurationError(f"unknown query token {query!r}")
    weights = att[:, row, cfg.num_tokens :].mean(axis=0)
    grid = weights.reshape(cfg.grid)
    raw = resize(grid, (cfg.image_height, cfg.image_width))
    return SaliencyMap(normalize(raw), "attention", "last", None, raw)


def model_attention_map(model: Model, image: np.ndarray, query: str = "class") -> SaliencyMap:
    """Run ``model`` on one image and map its last-layer attention."""
    from .training import prepare

    if not model.spec.is_transformer:
        raise ConfigurationError("attention maps need a transformer model")
    was = model.training
    model.eval()
    try:
        with T.no_grad():
            out = model(prepare(np.asarray(image)[None], model), capture_attention=True)
    finally:
        model.training = was
    layer = len(out.attention) - 1
    smap = attention_map(out.attention[-1][0], model.spec.patch_config, query)
    smap.source_layer = f"blocks.{layer}"
    return smap


def grad_cam(model: Model, image: np.ndarray, target_class: int) -> SaliencyMap:
    """Grad-CAM on the final dense-block activations.

    Channel weights are the spatial mean of d logit / d A; the map is
    ``ReLU(sum_c alpha_c A_c)``, bilinearly resized and min-max normalised.
    """
    from .training import prepare

    if model.spec.family != "densenet":
        raise ConfigurationError("grad_cam needs a densenet model")
    if not 0 <= target_class < model.spec.num_classes:
        raise ContractError(f"class index {target_class} out of range 0..{model.spec.num_classes - 1}")
    was = model.training
    model.eval()
    try:
        x = prepare(np.asarray(image)[None], model)
        with T.no_grad():
            feats = model.features(x).data
        a = Tensor(feats.astype(np.float64), requires_grad=True)
        head = {k: Tensor(v.data.astype(np.float64)) for k, v in model.params["head"].items()}
        pooled = T.mean(a, axis=(2, 3))
        logit = (T.matmul(pooled, head["weight"]) + head["bias"])[0, target_class]
        T.backward(logit)
    finally:
        model.training = was
    alpha = a.grad[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, feats[0].astype(np.float64), axes=1), 0.0)
    h, w = model.spec.input_shape[1:]
    raw = np.maximum(resize(cam, (h, w)), 0.0)
    return SaliencyMap(normalize(raw), "grad_cam", "features.norm", target_class, raw)


def blend(image: np.ndarray, saliency: np.ndarray) -> np.ndarray:
    return 0.5 * np.asarray(image, dtype=np.float64) + 0.5 * np.asarray(saliency, dtype=np.float64)


def export_overlay(image: np.ndarray, smap: SaliencyMap | np.ndarray, path) -> dict[str, Path]:
    """Write ``<stem>_image.pgm``, ``<stem>_map.pgm``, ``<stem>_overlay.pgm`` and ``<stem>_map.csv``."""
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap)
    image = np.asarray(image, dtype=np.float64)
    if image.shape != values.shape:
        raise ContractError(f"image {image.shape} and map {values.shape} differ in shape")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("") if path.suffix else path
    out = {
        "image": stem.with_name(stem.name + "_image.pgm"),
        "map": stem.with_name(stem.name + "_map.pgm"),
        "overlay": stem.with_name(stem.name + "_overlay.pgm"),
        "csv": stem.with_name(stem.name + "_map.csv"),
    }
    write_pgm(out["image"], image)
    write_pgm(out["map"], values)
    write_pgm(out["overlay"], blend(image, values))
    with open(out["csv"], "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in values])
    return out


def load_map(path) -> np.ndarray:
    return read_pgm(path)
