"""Manifests, label policy, patient-grouped splits, synthetic data, augmentation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from .errors import ConfigurationError, ParseError, PlanningError

CLASSES = ("Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural Effusion")
NUM_CLASSES = len(CLASSES)
MANIFEST_HEADER = ["image_path", "patient_id", "l1", "l2", "l3", "l4", "l5"]
FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

Policy = Literal["u_ones", "u_zeros"]


@dataclass
class Record:
    image_path: str
    patient_id: str
    raw_labels: tuple[int, ...]
    resolved_labels: tuple[int, ...] | None = None


# ---------------------------------------------------------------------------
# Manifest and label policy
# ---------------------------------------------------------------------------


def load_manifest(path) -> list[Record]:
    """Parse ``image_path,patient_id,l1..l5`` rows; labels must be 1, 0 or -1."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}:1: missing header") from None
        header = [h.strip() for h in header]
        missing = [c for c in MANIFEST_HEADER if c not in header]
        if missing:
            raise ParseError(f"{path}:1: missing column(s) {missing}")
        idx = [header.index(c) for c in MANIFEST_HEADER]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            labels = []
            for i in idx[2:]:
                value = row[i].strip()
                try:
                    label = int(float(value))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: label {value!r} is not a number") from None
                if label not in (1, 0, -1) or float(value) != label:
                    raise ParseError(f"{path}:{lineno}: label {value!r} not in {{1, 0, -1}}")
                labels.append(label)
            records.append(Record(row[idx[0]].strip(), row[idx[1]].strip(), tuple(labels)))
    return records


def write_manifest(records: Sequence[Record], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.image_path, r.patient_id, *r.raw_labels])


def apply_policy(records: Sequence[Record], policy: Policy = "u_ones") -> list[Record]:
    """Resolve uncertain (-1) labels: ``u_ones`` -> 1, ``u_zeros`` -> 0."""
    if policy not in ("u_ones", "u_zeros"):
        raise ConfigurationError(f"unknown uncertainty policy {policy!r}")
    fill = 1 if policy == "u_ones" else 0
    return [
        Record(r.image_path, r.patient_id, r.raw_labels, tuple(fill if v == -1 else v for v in r.raw_labels))
        for r in records
    ]


def label_matrix(records: Sequence[Record]) -> np.ndarray:
    if any(r.resolved_labels is None for r in records):
        raise ConfigurationError("labels not resolved; call apply_policy first")
    return np.array([r.resolved_labels for r in records], dtype=np.int64).reshape(len(records), NUM_CLASSES)


# ---------------------------------------------------------------------------
# Split planning
# ---------------------------------------------------------------------------


@dataclass
class Fold:
    train: list[int]
    val: list[int]
    subsets: dict[float, list[int]] = field(default_factory=dict)

    def subset(self, fraction: float) -> list[int]:
        if fraction >= 1.0:
            return list(self.train)
        key = round(float(fraction), 6)
        if key not in self.subsets:
            raise ConfigurationError(f"no fraction subset {fraction}; planned {sorted(self.subsets)}")
        return list(self.subsets[key])


@dataclass
class FoldPlan:
    """Record indices for the shared test split and k train/val folds.

    Indices refer to positions in the record list the plan was made from.
    """

    test: list[int]
    folds: list[Fold]
    seed: int
    group_by: str = "patient"
    policy: str = "u_ones"
    stratify: bool = False
    test_fraction: float = 0.2

    @property
    def pool(self) -> list[int]:
        return sorted(self.folds[0].train + self.folds[0].val)

    def to_json(self) -> str:
        data = asdict(self)
        for fold in data["folds"]:
            fold["subsets"] = {f"{k:g}": v for k, v in fold["subsets"].items()}
        return json.dumps(data, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        data = json.loads(text)
        folds = [
            Fold(f["train"], f["val"], {round(float(k), 6): v for k, v in f["subsets"].items()})
            for f in data.pop("folds")
        ]
        return cls(folds=folds, **data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())


def _ordered_for_subsets(train: list[int], rng, labels: np.ndarray | None) -> list[int]:
    """A permutation of ``train`` whose prefixes form the fraction subsets.

    With ``labels`` the permutation interleaves label-combination strata so
    every prefix keeps roughly the pool's label mix.
    """
    perm = [train[i] for i in rng.permutation(len(train))]
    if labels is None:
        return perm
    strata: dict[tuple, list[int]] = {}
    for idx in perm:
        strata.setdefault(tuple(labels[idx]), []).append(idx)
    keyed = []
    for members in strata.values():
        n = len(members)
        offset = rng.random()
        keyed.extend(((j + offset) / n, idx) for j, idx in enumerate(members))
    keyed.sort()
    return [idx for _, idx in keyed]


def plan_splits(
    records: Sequence[Record],
    seed: int = 0,
    n_folds: int = 5,
    test_fraction: float = 0.2,
    fractions: Sequence[float] = FRACTIONS,
    stratify: bool = False,
    policy: str = "u_ones",
) -> FoldPlan:
    """Patient-grouped test split, k train/val folds and nested fraction subsets.

    Patients are shuffled with ``seed``; the first ``round(test_fraction * P)``
    go to the test split and the rest are dealt into ``n_folds`` validation
    groups. Fraction subsets of each fold's training records are prefixes of
    one shuffled ordering, so ``subset(0.1)`` is contained in ``subset(0.2)``.
    """
    patients: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        patients.setdefault(r.patient_id, []).append(i)
    ids = sorted(patients)
    n_test = int(round(test_fraction * len(ids)))
    if len(ids) - n_test < n_folds or n_test < 1:
        raise PlanningError(f"{len(ids)} patients cannot fill a test split and {n_folds} folds")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    test_patients, pool_patients = order[:n_test], order[n_test:]
    groups = np.array_split(np.arange(len(pool_patients)), n_folds)

    labels = None
    if stratify:
        resolved = apply_policy(records, policy) if records and records[0].resolved_labels is None else records
        labels = label_matrix(resolved)

    def members(pats) -> list[int]:
        return sorted(i for p in pats for i in patients[p])

    folds = []
    for g in groups:
        val_set = set(g.tolist())
        val = members(pool_patients[j] for j in sorted(val_set))
        train = members(pool_patients[j] for j in range(len(pool_patients)) if j not in val_set)
        ordered = _ordered_for_subsets(train, rng, labels)
        subsets = {round(float(f), 6): sorted(ordered[: int(round(f * len(train)))]) for f in fractions}
        folds.append(Fold(train=train, val=val, subsets=subsets))
    return FoldPlan(
        test=members(test_patients), folds=folds, seed=seed, policy=policy, stratify=stratify,
        test_fraction=test_fraction,
    )


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

# (row0, row1, col0, col1) in units of image_size / 32
REGIONS = (
    (4, 12, 4, 12),  # Atelectasis: upper left
    (12, 20, 12, 20),  # Cardiomegaly: centre
    (4, 12, 20, 28),  # Consolidation: upper right
    (20, 28, 4, 12),  # Edema: lower left
    (20, 28, 20, 28),  # Pleural Effusion: lower right
)

DEFAULT_CORRELATION = np.array(
    [
        [1.0, 0.1, 0.3, 0.2, 0.3],
        [0.1, 1.0, 0.1, 0.3, 0.2],
        [0.3, 0.1, 1.0, 0.2, 0.2],
        [0.2, 0.3, 0.2, 1.0, 0.4],
        [0.3, 0.2, 0.2, 0.4, 1.0],
    ]
)


@dataclass
class SynthConfig:
    """Synthetic chest-radiograph-like data.

    Labels are thresholded correlated Gaussians (a Gaussian copula), which
    gives the requested marginals exactly in expectation while
    ``correlation`` controls co-occurrence.
    """

    image_size: int = 32
    prevalence: tuple[float, ...] = (0.30, 0.20, 0.25, 0.25, 0.35)
    correlation: tuple[tuple[float, ...], ...] = tuple(map(tuple, DEFAULT_CORRELATION))
    uncertain_rate: float = 0.05
    noise_sigma: float = 0.05
    pattern_amplitude: float = 0.35
    max_images_per_patient: int = 3

    def region_slices(self, k: int) -> tuple[slice, slice]:
        s = self.image_size / 32
        r0, r1, c0, c1 = REGIONS[k]
        return slice(int(r0 * s), int(r1 * s)), slice(int(c0 * s), int(c1 * s))


def _background(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = 0.55 + 0.05 * rng.standard_normal()
    img = img - 0.1 * yy
    for cx in (0.3, 0.7):
        dx = (xx - (cx + 0.02 * rng.standard_normal())) / 0.17
        dy = (yy - (0.5 + 0.02 * rng.standard_normal())) / 0.34
        img = img - 0.25 * (dx * dx + dy * dy < 1.0)
    return np.asarray(img, dtype=np.float64)


def pattern(k: int, cfg: SynthConfig) -> np.ndarray:
    """The fixed intensity pattern added for a positive label of class ``k``.

    Each class has its own shape (blob, horizontal bar, vertical bar, ring,
    cross) in its own region, so both position and appearance identify it.
    """
    size = cfg.image_size
    out = np.zeros((size, size))
    rs, cs = cfg.region_slices(k)
    h, w = rs.stop - rs.start, cs.stop - cs.start
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r = np.hypot((yy - cy) / (h / 2), (xx - cx) / (w / 2))
    if k == 0:
        shape = np.exp(-(r * r) / (2 * 0.5**2))
    elif k == 1:
        shape = (np.abs(yy - cy) < h / 4).astype(float)
    elif k == 2:
        shape = (np.abs(xx - cx) < w / 4).astype(float)
    elif k == 3:
        shape = ((r > 0.45) & (r < 0.95)).astype(float)
    else:
        du = np.abs((yy - cy) / h - (xx - cx) / w)
        dv = np.abs((yy - cy) / h + (xx - cx) / w)
        shape = ((np.minimum(du, dv) < 0.2) & (r < 1.1)).astype(float)
    out[rs, cs] = cfg.pattern_amplitude * shape
    return out


def synth_labels(n: int, rng, cfg: SynthConfig) -> np.ndarray:
    corr = np.asarray(cfg.correlation, dtype=float)
    z = rng.multivariate_normal(np.zeros(NUM_CLASSES), corr, size=n, method="cholesky")
    thresh = norm.ppf(np.asarray(cfg.prevalence))
    return (z < thresh).astype(np.int64)


def synth_generate(n: int, seed: int = 0, cfg: SynthConfig | None = None) -> tuple[np.ndarray, list[Record]]:
    """Generate ``n`` grayscale images in [0, 1] and matching records.

    A positive class ``k`` adds :func:`pattern` in region ``k``; about
    ``uncertain_rate`` of positive labels are emitted as -1.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    truth = synth_labels(n, rng, cfg)
    patterns = np.stack([pattern(k, cfg) for k in range(NUM_CLASSES)])
    images = np.empty((n, cfg.image_size, cfg.image_size))
    for i in range(n):
        img = _background(rng, cfg.image_size) + np.tensordot(truth[i], patterns, axes=1)
        img += cfg.noise_sigma * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    raw = truth.copy()
    uncertain = (truth == 1) & (rng.random(truth.shape) < cfg.uncertain_rate)
    raw[uncertain] = -1

    records = []
    patient = 0
    i = 0
    while i < n:
        count = int(rng.integers(1, cfg.max_images_per_patient + 1))
        for j in range(i, min(n, i + count)):
            records.append(Record(f"img_{j:06d}.pgm", f"p{patient:05d}", tuple(int(v) for v in raw[j])))
        i += count
        patient += 1
    return images, records


# ---------------------------------------------------------------------------
# Image I/O and transforms
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255; ``image`` holds reals in [0, 1]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos + 1 : pos + 1 + w * h]
    if len(body) != w * h:
        raise ParseError(f"{path}: expected {w * h} pixels, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def resize(image: np.ndarray, target: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    if isinstance(target, int):
        target = (target, target)
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ConfigurationError(f"resize target must be positive, got {target}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    if (h, w) == (th, tw):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    top = img[..., y0, :][..., x0] * (1 - fx) + img[..., y0, :][..., x1] * fx
    bot = img[..., y1, :][..., x0] * (1 - fx) + img[..., y1, :][..., x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def to_channels(images: np.ndarray, channels: int = 3) -> np.ndarray:
    """``N x H x W`` grayscale -> ``N x C x H x W`` by replication."""
    images = np.asarray(images)
    return np.repeat(images[:, None], channels, axis=1)


@dataclass
class AugmentConfig:
    """Reduced RandAugment (flip, rotate, intensity) followed by random erasing."""

    ops_per_image: int = 2
    flip_prob: float = 0.5
    rotate_max_deg: float = 10.0
    intensity_jitter_range: tuple[float, float] = (0.9, 1.1)
    erase_prob: float = 0.25
    erase_area_range: tuple[float, float] = (0.02, 0.15)

    def __post_init__(self):
        for name in ("flip_prob", "erase_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.erase_area_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError(f"erase_area_range must satisfy 0 < lo <= hi <= 1, got {self.erase_area_range}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(ops_per_image=0, flip_prob=0.0, rotate_max_deg=0.0, erase_prob=0.0)


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-image stream; independent of batch order and worker scheduling."""
    return np.random.default_rng([seed, epoch, index])


def erase_box(shape: tuple[int, int], cfg: AugmentConfig, rng) -> tuple[int, int, int, int]:
    h, w = shape
    lo, hi = cfg.erase_area_range
    for _ in range(20):
        area = rng.uniform(lo, hi) * h * w
        aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if 0 < eh <= h and 0 < ew <= w and lo <= eh * ew / (h * w) <= hi:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            return y, x, eh, ew
    side = max(1, int(round(np.sqrt(lo * h * w))))
    while side * side < lo * h * w:
        side += 1
    return 0, 0, min(side, h), min(side, w)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment a 2-D image; the output keeps the shape and stays in [0, 1]."""
    img = np.asarray(image, dtype=np.float64).copy()
    ops = ("flip", "rotate", "intensity")
    for _ in range(cfg.ops_per_image):
        op = ops[int(rng.integers(len(ops)))]
        if op == "flip":
            if rng.random() < cfg.flip_prob:
                img = img[:, ::-1].copy()
        elif op == "rotate":
            if cfg.rotate_max_deg > 0:
                angle = rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg)
                img = ndimage.rotate(img, angle, reshape=False, order=1, mode="nearest")
        else:
            lo, hi = cfg.intensity_jitter_range
            img = img * rng.uniform(lo, hi) + rng.uniform(-(hi - 1.0) / 2, (hi - 1.0) / 2)
    img = np.clip(img, 0.0, 1.0)
    if cfg.erase_prob > 0 and rng.random() < cfg.erase_prob:
        y, x, eh, ew = erase_box(img.shape, cfg, rng)
        img[y : y + eh, x : x + ew] = rng.random((eh, ew))
    return img


def augment_batch(images: np.ndarray, indices: Sequence[int], cfg: AugmentConfig, seed: int, epoch: int) -> np.ndarray:
    """Augment ``N x H x W`` images; stream ``i`` is keyed by ``indices[i]``."""
    return np.stack([augment(img, cfg, augment_rng(seed, epoch, int(i))) for img, i in zip(images, indices)])


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------


def load_images(records: Sequence[Record], root, size: int | None = None) -> np.ndarray:
    """Read each record's PGM (relative to ``root``), resizing to ``size`` if given."""
    root = Path(root)
    out = []
    for r in records:
        img = read_pgm(root / r.image_path)
        if size is not None and img.shape != (size, size):
            img = resize(img, size)
        out.append(img)
    return np.stack(out) if out else np.zeros((0, size or 0, size or 0))


def write_dataset(images: np.ndarray, records: Sequence[Record], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for img, r in zip(images, records):
        write_pgm(out_dir / r.image_path, img)
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    return manifest
