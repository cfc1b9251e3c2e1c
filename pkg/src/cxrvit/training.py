"""Losses, optimiser, learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import AugmentConfig, augment_batch, to_channels
from .errors import ConfigurationError, ContractError, NonFiniteError, WeightingError
from .models import Model, clone, forward, predict_logits
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    lr_init: float = 5e-5
    max_epochs: int = 50
    warmup_epochs: int = 2
    batch_size: int = 128
    weight_decay: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    patience: int = 5
    distill_lambda: float = 1.0
    distill_temperature: float = 1.0
    seed: int = 0
    max_class_weight: float | None = None
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.warmup_epochs >= self.max_epochs:
            raise ConfigurationError("warmup_epochs must be smaller than max_epochs")
        if self.lr_init <= 0:
            raise ConfigurationError("lr_init must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.distill_lambda < 0 or self.distill_temperature <= 0:
            raise ConfigurationError("distill_lambda must be >= 0 and distill_temperature > 0")
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            for key in ("intensity_jitter_range", "erase_area_range"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            self.augment = AugmentConfig(**aug)
        self.adam_betas = tuple(self.adam_betas)

    @classmethod
    def for_family(cls, family: str, **overrides) -> "TrainConfig":
        """Defaults per family: lr 1e-4 / wd 1e-4 for CNNs, 5e-5 / 0.05 for transformers."""
        base = {"lr_init": 1e-4, "weight_decay": 1e-4} if family == "densenet" else {"lr_init": 5e-5, "weight_decay": 0.05}
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def class_weights(labels: np.ndarray, max_weight: float | None = None) -> np.ndarray:
    """Inverse-frequency weights ``n / (K * count_k)``; all ones when balanced.

    A class without positives raises :class:`WeightingError` unless
    ``max_weight`` is given, in which case weights are capped at it.
    """
    labels = np.asarray(labels)
    n, k = labels.shape
    counts = labels.sum(axis=0).astype(np.float64)
    if np.any(counts == 0) and max_weight is None:
        empty = [int(i) for i in np.flatnonzero(counts == 0)]
        raise WeightingError(f"classes {empty} have no positive labels; pass max_weight (e.g. 100) to cap")
    with np.errstate(divide="ignore"):
        w = n / (k * counts)
    if max_weight is not None:
        w = np.minimum(w, max_weight)
    return w


def _as_targets(targets) -> np.ndarray:
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("targets must be binary (0 or 1)")
    return t


def weighted_bce(logits: Tensor, targets, weights) -> Tensor:
    """Mean over batch and classes of ``w_k * BCE(sigmoid(z), t)``.

    Uses ``BCE = softplus(z) - t * z`` which is exact and overflow-free.
    """
    t = _as_targets(targets).astype(logits.dtype)
    w = np.asarray(weights, dtype=logits.dtype)
    per = T.softplus(logits) - logits * t
    return T.mean(per * w)


def distill_kl(dist_logits: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """Per-label Bernoulli KL(teacher || student) at temperature ``tau``, times ``tau**2``.

    Teacher logits are treated as constants.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    zt = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    p = np.clip(T._sigmoid_np(zt.astype(dist_logits.dtype) / temperature), PROB_CLAMP, 1 - PROB_CLAMP)
    q = T.clip(T.sigmoid(dist_logits * (1.0 / temperature)), PROB_CLAMP, 1 - PROB_CLAMP)
    const = p * np.log(p) + (1 - p) * np.log(1 - p)
    cross = T.log(q) * p + T.log(1.0 - q) * (1 - p)
    return T.mean(const - cross) * (temperature**2)


def total_loss(
    class_logits: Tensor,
    targets,
    weights,
    cfg: TrainConfig,
    dist_logits: Tensor | None = None,
    teacher_logits=None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted BCE plus ``lambda * KL`` when distilling.

    Returns the loss and its float components ``{"bce", "kl"}``.
    """
    if (dist_logits is None) != (teacher_logits is None):
        raise ContractError("dist_logits and teacher_logits must be given together")
    bce = weighted_bce(class_logits, targets, weights)
    if dist_logits is None:
        return bce, {"bce": bce.item(), "kl": 0.0}
    kl = distill_kl(dist_logits, teacher_logits, cfg.distill_temperature)
    return bce + kl * cfg.distill_lambda, {"bce": bce.item(), "kl": kl.item()}


# ---------------------------------------------------------------------------
# Schedule and optimiser
# ---------------------------------------------------------------------------


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_init`` then cosine decay to zero at the last step."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.max_epochs * steps_per_epoch
    if step < warm:
        return cfg.lr_init * (step + 1) / warm
    span = total - warm - 1
    progress = 1.0 if span <= 0 else min((step - warm) / span, 1.0)
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


def no_decay(name: str) -> bool:
    """Biases, norm scales, tokens and position tables are not decayed."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "cls_token", "dist_token", "pos_embed") or ".norm" in f".{name}" or name.startswith("norm")


class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks ``theta`` by ``lr * wd * theta`` and then applies
    the bias-corrected Adam update.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.betas = betas
        self.eps = eps
        self.decay = [0.0 if no_decay(n) else weight_decay for n in self.names]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v, wd in zip(self.params, self.m, self.v, self.decay):
            adamw_step(p.data, p.grad, m, v, self.t, lr, wd, b1, b2, self.eps, c1, c2)


def adamw_step(theta, grad, m, v, t, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8, c1=None, c2=None):
    """In-place AdamW update of ``theta`` with moment buffers ``m`` and ``v``."""
    if t < 1:
        raise ContractError("adamw step counter starts at 1")
    if weight_decay:
        theta *= 1.0 - lr * weight_decay
    if grad is None:
        grad = np.zeros_like(theta)
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    c1 = 1.0 - beta1**t if c1 is None else c1
    c2 = 1.0 - beta2**t if c2 is None else c2
    theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return theta


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EarlyStopping:
    """Stops after ``patience`` epochs without a new best validation loss."""

    patience: int
    best: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    bce: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0
    stopping_epoch: int = 0
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "bce", "kl", "lr"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.bce, self.kl, self.lr):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


@dataclass
class FoldData:
    """Grayscale images (``N x H x W`` in [0, 1]) and binary labels per split."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    train_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.train_ids is None:
            self.train_ids = np.arange(len(self.train_images))


def prepare(images: np.ndarray, model: Model) -> np.ndarray:
    """Replicate grayscale images to the model's channel count and dtype."""
    c = model.spec.input_shape[0]
    x = to_channels(images, c) if images.ndim == 3 else images
    return np.ascontiguousarray(x, dtype=model.dtype)


def evaluate_loss(model: Model, images, labels, weights, cfg: TrainConfig, teacher: Model | None = None,
                  batch_size: int = 256) -> tuple[float, dict[str, float]]:
    """Eval-mode loss over a whole split (no augmentation)."""
    x = prepare(images, model)
    cls_logits, dist_logits = predict_logits(model, x, batch_size)
    teacher_logits = None
    if teacher is not None and dist_logits is not None:
        teacher_logits, _ = predict_logits(teacher, prepare(images, teacher), batch_size)
    else:
        dist_logits = None
    with T.no_grad():
        loss, parts = total_loss(Tensor(cls_logits), labels, weights, cfg,
                                 None if dist_logits is None else Tensor(dist_logits), teacher_logits)
    return loss.item(), parts


def train(
    model: Model,
    data: FoldData,
    cfg: TrainConfig,
    teacher: Model | None = None,
    weights: np.ndarray | None = None,
    progress: bool = False,
) -> tuple[Model, TrainHistory]:
    """Train ``model`` in place and return the best-validation-loss copy.

    The teacher, when given, is frozen and run in eval mode; its logits on the
    (augmented) batch are the distillation targets of the student's
    distillation head.
    """
    distilling = teacher is not None and cfg.distill_lambda > 0
    if teacher is not None and model.spec.family != "deit":
        raise ContractError("a teacher is only used with deit students")
    if model.spec.family == "deit" and cfg.distill_lambda > 0 and teacher is None:
        raise ContractError("deit training with distill_lambda > 0 needs a teacher")
    n = len(data.train_images)
    if n == 0:
        raise ContractError("empty training split")
    train_labels = np.asarray(data.train_labels)
    if weights is None:
        weights = class_weights(train_labels, cfg.max_class_weight)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt = AdamW(model.named_parameters(), cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory(steps_per_epoch=steps_per_epoch)
    best_state = model.state()
    order_rng = np.random.default_rng([cfg.seed, 7919])
    if teacher is not None:
        teacher.eval()

    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = order_rng.permutation(n)
        totals = {"loss": 0.0, "bce": 0.0, "kl": 0.0}
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            imgs = data.train_images[idx]
            if cfg.augment is not None:
                imgs = augment_batch(imgs, data.train_ids[idx], cfg.augment, cfg.seed, epoch)
            x = prepare(imgs, model)
            targets = train_labels[idx]
            out = forward(model, x)
            teacher_logits = None
            if distilling:
                with T.no_grad():
                    teacher_logits = forward(teacher, prepare(imgs, teacher)).class_logits.data
            loss, parts = total_loss(
                out.class_logits, targets, weights, cfg,
                out.dist_logits if distilling else None, teacher_logits,
            )
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            T.backward(loss)
            lr = lr_at(step, steps_per_epoch, cfg)
            opt.step(lr)
            history.lr_trace.append(lr)
            step += 1
            frac = len(idx) / n
            totals["loss"] += loss.item() * frac
            totals["bce"] += parts["bce"] * frac
            totals["kl"] += parts["kl"] * frac

        val_loss, _ = evaluate_loss(model, data.val_images, data.val_labels, weights, cfg,
                                    teacher if distilling else None)
        history.epochs.append(epoch)
        history.train_loss.append(totals["loss"])
        history.bce.append(totals["bce"])
        history.kl.append(totals["kl"])
        history.val_loss.append(val_loss)
        history.lr.append(history.lr_trace[-1])
        if progress:
            log.info("epoch %d train %.4f val %.4f kl %.4f lr %.2e", epoch, totals["loss"], val_loss, totals["kl"], lr)
        improved = val_loss < stopper.best
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = model.state()
        history.stopping_epoch = epoch
        if stop:
            break

    history.best_epoch = stopper.best_epoch
    best = clone(model)
    best.load_state(best_state)
    best.eval()
    return best, history
