"""Classification metrics, cross-fold aggregation and the data-fraction sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import CLASSES, FoldPlan
from .errors import AggregationError, ContractError, UndefinedMetricError
from .models import Model, build, get_spec, parameter_count, predict_logits
from .tensor import _sigmoid_np

log = logging.getLogger(__name__)


def auroc(scores, labels) -> float:
    """Exact Mann-Whitney AUROC: P(pos > neg) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks split ties evenly
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 of ``scores >= threshold``; 0 when precision or recall is undefined."""
    pred = np.asarray(scores).ravel() >= threshold
    truth = np.asarray(labels).ravel() == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def weighted_average(values, support) -> float:
    """Support-weighted mean over classes whose value is defined (not NaN)."""
    values = np.asarray(values, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64)
    if np.any(support < 0):
        raise ContractError("support must be non-negative")
    ok = ~np.isnan(values)
    total = support[ok].sum()
    if total <= 0:
        raise ContractError("weighted average needs positive total support")
    return float((values[ok] * support[ok]).sum() / total)


def aggregate_folds(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and sample standard deviation (n - 1 denominator)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise AggregationError(f"need at least 2 folds, got {values.size}")
    return float(values.mean()), float(values.std(ddof=1))


@dataclass
class MetricsReport:
    per_class_auroc: list[float]
    per_class_f1: list[float]
    support: list[int]
    weighted_auroc: float
    weighted_f1: float
    fold_id: int | None = None
    fraction: float | None = None
    model: str = ""
    threshold: float = 0.5

    def rows(self) -> list[dict]:
        """Per-class rows plus a final ``weighted`` row."""
        out = [
            {"class": name, "auroc": a, "f1": f, "support": s}
            for name, a, f, s in zip(CLASSES, self.per_class_auroc, self.per_class_f1, self.support)
        ]
        out.append({"class": "weighted", "auroc": self.weighted_auroc, "f1": self.weighted_f1,
                    "support": int(sum(self.support))})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["class", "auroc", "f1", "support"], lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_auroc"] = [None if math.isnan(v) else v for v in self.per_class_auroc]
        return d


def metrics_report(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5, **meta) -> MetricsReport:
    """Per-class and support-weighted AUROC/F1 from probabilities.

    Classes whose labels are all one value get an undefined (NaN) AUROC and
    are left out of the weighted AUROC.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    k = labels.shape[1]
    support = labels.sum(axis=0).astype(int)
    aurocs, f1s = [], []
    for c in range(k):
        try:
            aurocs.append(auroc(probs[:, c], labels[:, c]))
        except UndefinedMetricError:
            warnings.warn(f"AUROC undefined for class {c}; excluded from weighting", stacklevel=2)
            aurocs.append(float("nan"))
        f1s.append(f1(probs[:, c], labels[:, c], threshold))
    return MetricsReport(
        per_class_auroc=aurocs,
        per_class_f1=f1s,
        support=support.tolist(),
        weighted_auroc=weighted_average(aurocs, support),
        weighted_f1=weighted_average(f1s, support),
        threshold=threshold,
        **meta,
    )


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, threshold: float = 0.5,
             name: str | None = None, **meta) -> MetricsReport:
    """Report for the class head of ``model`` on ``images``."""
    from .training import prepare

    logits, _ = predict_logits(model, prepare(images, model))
    return metrics_report(_sigmoid_np(logits.astype(np.float64)), labels, threshold,
                          model=name or model.spec.name, **meta)


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepCell:
    model: str
    fraction: float
    fold: int
    report: MetricsReport | None = None
    error: str | None = None
    epochs: int = 0


@dataclass
class SweepResult:
    cells: list[SweepCell] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)

    def summary(self) -> list[dict]:
        """Mean and sample std per (model, fraction) over successful folds."""
        groups: dict[tuple[str, float], list[MetricsReport]] = {}
        for c in self.cells:
            if c.report is not None:
                groups.setdefault((c.model, c.fraction), []).append(c.report)
        rows = []
        for (model, frac), reports in groups.items():
            row = {"model": model, "fraction": frac, "folds": len(reports), "param": self.params.get(model)}
            for metric in ("weighted_auroc", "weighted_f1"):
                vals = [getattr(r, metric) for r in reports]
                if len(vals) >= 2:
                    m, s = aggregate_folds(vals)
                else:
                    m, s = float(vals[0]), float("nan")
                key = metric.split("_")[1]
                row[f"{key}_mean"] = m
                row[f"{key}_std"] = s
            rows.append(row)
        return rows

    def grid_rows(self) -> list[dict]:
        rows = []
        for c in self.cells:
            r = c.report
            rows.append({
                "model": c.model,
                "fraction": c.fraction,
                "fold": c.fold,
                "weighted_auroc": "" if r is None else r.weighted_auroc,
                "weighted_f1": "" if r is None else r.weighted_f1,
                "epochs": c.epochs,
                "error": c.error or "",
            })
        return rows

    @property
    def failed(self) -> list[SweepCell]:
        return [c for c in self.cells if c.error is not None]

    def write(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        grid = out_dir / "grid.csv"
        with open(grid, "w", newline="") as fh:
            fields_ = ["model", "fraction", "fold", "weighted_auroc", "weighted_f1", "epochs", "error"]
            w = csv.DictWriter(fh, fieldnames=fields_, lineterminator="\n")
            w.writeheader()
            w.writerows(self.grid_rows())
        summary = out_dir / "summary.json"
        rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
                for r in self.summary()]
        summary.write_text(json.dumps({"rows": rows}, indent=1, sort_keys=True))
        svg = out_dir / "sweep.svg"
        svg.write_text(sweep_svg(self.summary()))
        return {"grid": grid, "summary": summary, "svg": svg}


def cell_seed(global_seed: int, model: str, fraction: float, fold: int) -> int:
    """Deterministic per-cell seed, independent of execution order."""
    digest = sum((i + 1) * b for i, b in enumerate(model.encode()))
    return int(np.random.SeedSequence([global_seed, digest, int(round(fraction * 1000)), fold]).generate_state(1)[0])


def _config_for(configs, model_name: str):
    if isinstance(configs, dict):
        return configs[model_name]
    return configs


def run_cell(model_name, fraction, fold_idx, plan, images, labels, configs, seed, teacher=None, image_size=None):
    """Train one grid cell on its fraction subset and test on the shared split."""
    from .training import FoldData, train

    fold = plan.folds[fold_idx]
    ids = np.asarray(fold.subset(fraction))
    val = np.asarray(fold.val)
    cs = cell_seed(seed, model_name, fraction, fold_idx)
    cfg = replace(_config_for(configs, model_name), seed=cs)
    overrides = {} if image_size is None else {"input_shape": (3, image_size, image_size)}
    model = build(get_spec(model_name, **overrides), seed=cs, dtype=cfg.dtype)
    data = FoldData(images[ids], labels[ids], images[val], labels[val], train_ids=ids)
    best, history = train(model, data, cfg, teacher=teacher)
    test = np.asarray(plan.test)
    report = evaluate(best, images[test], labels[test], name=model_name, fold_id=fold_idx + 1, fraction=fraction)
    return report, history


def _run_coord(args) -> SweepCell:
    (m, f, i), plan, images, labels, configs, seed, teachers, image_size = args
    try:
        report, history = run_cell(m, f, i, plan, images, labels, configs, seed,
                                   teacher=teachers.get(m), image_size=image_size)
        return SweepCell(m, f, i + 1, report, epochs=history.stopping_epoch)
    except Exception as exc:  # noqa: BLE001 - failures are recorded per cell
        log.warning("sweep cell model=%s fraction=%s fold=%d failed: %s", m, f, i + 1, exc)
        return SweepCell(m, f, i + 1, None, error=f"{type(exc).__name__}: {exc}")


def sweep(
    plan: FoldPlan,
    images: np.ndarray,
    labels: np.ndarray,
    models: Sequence[str],
    configs,
    fractions: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
    folds: Sequence[int] | None = None,
    seed: int = 0,
    teachers: dict | None = None,
    jobs: int = 1,
    image_size: int | None = None,
) -> SweepResult:
    """Train and test every (model, fraction, fold) cell.

    ``configs`` is one :class:`TrainConfig` or a dict of them keyed by model
    name. ``image_size`` overrides the presets' input size. A failing cell is recorded with its error and the sweep carries
    on. Cells are seeded by :func:`cell_seed`, so results do not depend on
    ``jobs``.
    """
    folds = list(range(len(plan.folds))) if folds is None else list(folds)
    teachers = teachers or {}
    tasks = [((m, f, i), plan, images, labels, configs, seed, teachers, image_size)
             for m in models for f in fractions for i in folds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_coord, tasks))
    else:
        cells = [_run_coord(t) for t in tasks]
    overrides = {} if image_size is None else {"input_shape": (3, image_size, image_size)}
    params = {m: parameter_count(build(get_spec(m, **overrides), materialize=False)) for m in models}
    return SweepResult(cells=cells, params=params)


# ---------------------------------------------------------------------------
# SVG chart
# ---------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def sweep_svg(summary: list[dict], width: int = 800, height: int = 500) -> str:
    """Fraction (%) vs mean weighted AUROC (%) with a +-std band per model.

    Plot area spans x in [70, width - 160] and y in [40, height - 60]; the x
    axis maps 0..100 % and the y axis maps the data range padded to whole
    multiples of 5 %.
    """
    left, right, top, bottom = 70, width - 160, 40, height - 60
    models = sorted({r["model"] for r in summary})
    vals = []
    for r in summary:
        std = r["auroc_std"] if r["auroc_std"] == r["auroc_std"] else 0.0
        vals += [100 * (r["auroc_mean"] - std), 100 * (r["auroc_mean"] + std)]
    lo = math.floor((min(vals) if vals else 50) / 5) * 5
    hi = math.ceil((max(vals) if vals else 100) / 5) * 5
    if hi <= lo:
        hi = lo + 5

    def px(frac):
        return left + (right - left) * frac * 100 / 100.0

    def py(v):
        return bottom - (bottom - top) * (v - lo) / (hi - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" width="{width}" height="{height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
    ]
    for pct in range(0, 101, 10):
        x = px(pct / 100)
        out.append(f'<line x1="{x:.1f}" y1="{bottom}" x2="{x:.1f}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{bottom + 20}" font-size="12" text-anchor="middle">{pct}</text>')
    for v in range(lo, hi + 1, 5):
        y = py(v)
        out.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" font-size="12" text-anchor="end">{v}</text>')
    out.append(f'<text x="{(left + right) / 2}" y="{height - 20}" font-size="14" text-anchor="middle">'
               "training set size (%)</text>")
    out.append(f'<text x="20" y="{(top + bottom) / 2}" font-size="14" text-anchor="middle" '
               f'transform="rotate(-90 20 {(top + bottom) / 2})">weighted AUROC (%)</text>')
    for i, model in enumerate(models):
        color = _PALETTE[i % len(_PALETTE)]
        rows = sorted((r for r in summary if r["model"] == model), key=lambda r: r["fraction"])
        pts = [(px(r["fraction"]), 100 * r["auroc_mean"]) for r in rows]
        stds = [100 * (r["auroc_std"] if r["auroc_std"] == r["auroc_std"] else 0.0) for r in rows]
        upper = [(x, py(m + s)) for (x, m), s in zip(pts, stds)]
        lower = [(x, py(m - s)) for (x, m), s in zip(pts, stds)]
        band = " ".join(f"{x:.1f},{y:.1f}" for x, y in upper + lower[::-1])
        out.append(f'<polygon class="band" points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{x:.1f},{py(m):.1f}" for x, m in pts)
        out.append(f'<polyline class="model" data-model="{model}" points="{line}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        ly = top + 20 * i
        out.append(f'<line x1="{right + 15}" y1="{ly}" x2="{right + 35}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{right + 40}" y="{ly + 4}" font-size="12">{model}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
