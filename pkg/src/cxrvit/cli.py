"""Command-line entry point: ``cxrvit {synth,train,eval,sweep,params,saliency}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import evaluation as E
from . import models as M
from . import saliency as S
from . import training as TR
from .errors import CheckpointError, ConfigurationError, ContractError, ParseError, PlanningError

log = logging.getLogger("cxrvit")

PAPER_PRESETS = ("densenet-121", "densenet-201", "vit-s", "vit-b", "deit-s", "deit-b")


class UsageError(Exception):
    """Bad invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec_for(name: str, cfg: dict) -> M.ModelSpec:
    size = int(cfg["image_size"])
    return M.get_spec(name, input_shape=(3, size, size))


def _load_corpus(data_dir, cfg: dict, size: int):
    data_dir = Path(data_dir)
    records = D.load_manifest(data_dir / "manifest.csv")
    records = D.apply_policy(records, cfg["policy"])
    plan = D.plan_splits(records, seed=int(cfg["seed"]), policy=cfg["policy"])
    images = D.load_images(records, data_dir, size)
    return records, plan, images, D.label_matrix(records)


def _load_teacher(path, family: str, lam: float):
    if path is None:
        if family == "deit" and lam > 0:
            raise UsageError("deit training with distill_lambda > 0 needs --teacher")
        return None
    if family != "deit":
        raise UsageError("--teacher is only used with deit students")
    return M.load(path).eval()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    cfg = C.resolve({"seed": args.seed, "n": args.n, "image_size": args.size})
    cfg.setdefault("n", 1000)
    images, records = D.synth_generate(int(cfg["n"]), seed=int(cfg["seed"]),
                                       cfg=D.SynthConfig(image_size=int(cfg["image_size"])))
    D.write_dataset(images, records, out)
    C.dump({**cfg, "command": "synth"}, out / "config.json")
    print(f"wrote {len(records)} images to {out}")
    return 0


def cmd_train(args) -> int:
    flags = {
        "model": args.model, "data": args.data, "fold": args.fold, "seed": args.seed,
        "teacher": args.teacher, "max_epochs": args.epochs, "lr_init": args.lr,
        "batch_size": args.batch_size, "distill_lambda": args.distill_lambda,
        "paper_scale": args.paper_scale or None,
    }
    cfg = C.resolve(flags, args.config)
    if not cfg.get("model") or not cfg.get("data"):
        raise UsageError("train needs --model and --data")
    spec = _spec_for(cfg["model"], cfg)
    tcfg = C.train_config(cfg, spec.family)
    teacher = _load_teacher(cfg.get("teacher"), spec.family, tcfg.distill_lambda)
    out = _out_dir(args.out)

    records, plan, images, labels = _load_corpus(cfg["data"], cfg, spec.input_shape[1])
    fold_no = int(cfg["fold"])
    if not 1 <= fold_no <= len(plan.folds):
        raise UsageError(f"--fold must be in 1..{len(plan.folds)}")
    fold = plan.folds[fold_no - 1]
    tr, va = np.asarray(fold.train), np.asarray(fold.val)
    fd = TR.FoldData(images[tr], labels[tr], images[va], labels[va], train_ids=tr)

    model = M.build(spec, seed=int(cfg["seed"]), dtype=tcfg.dtype)
    best, history = TR.train(model, fd, tcfg, teacher=teacher, progress=args.verbose)
    cfg = {**cfg, "command": "train"}
    M.save(best, out / "model.ddb", extra={"config": cfg, "train": tcfg.to_dict()})
    history.write_csv(out / "history.csv")
    C.dump(cfg, out / "config.json")
    plan.save(out / "plan.json")
    print(f"trained {spec.name} for {history.stopping_epoch} epochs (best {history.best_epoch}); wrote {out}")
    return 0


def cmd_eval(args) -> int:
    manifest, _ = M.read_checkpoint(args.checkpoint)
    stored = dict(manifest.get("extra", {}).get("config", {}))
    flags = {"seed": args.seed, "threshold": args.threshold, "policy": args.policy}
    cfg = C.resolve({**stored, **{k: v for k, v in flags.items() if v is not None}}, args.config)
    spec = None
    if args.model:
        spec = _spec_for(args.model, {**cfg, "image_size": cfg.get("image_size", 32)})
    model = M.load(args.checkpoint, spec=spec)
    size = model.spec.input_shape[1]
    _, plan, images, labels = _load_corpus(args.data, cfg, size)
    test = np.asarray(plan.test)
    report = E.evaluate(model, images[test], labels[test], threshold=float(cfg["threshold"]),
                        name=model.spec.name)
    out = _out_dir(args.out or Path(args.checkpoint).parent)
    report.write_csv(out / "metrics.csv")
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    C.dump({**cfg, "command": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data)},
           out / "eval_config.json")
    print(f"weighted AUROC {report.weighted_auroc:.4f}  weighted F1 {report.weighted_f1:.4f}")
    return 0


def cmd_sweep(args) -> int:
    flags = {
        "data": args.data, "seed": args.seed, "max_epochs": args.epochs, "lr_init": args.lr,
        "models": args.models, "fractions": args.fractions, "folds": args.folds,
        "teacher": args.teacher, "paper_scale": args.paper_scale or None,
    }
    cfg = C.resolve(flags, args.config)
    if not cfg.get("data") or not cfg.get("models"):
        raise UsageError("sweep needs --data and --models")
    models = list(cfg["models"])
    fractions = [float(f) for f in (cfg.get("fractions") or (*D.FRACTIONS, 1.0))]
    specs = {m: _spec_for(m, cfg) for m in models}
    configs = {m: C.train_config(cfg, s.family) for m, s in specs.items()}
    teachers = {}
    for m, s in specs.items():
        t = _load_teacher(cfg.get("teacher") if s.family == "deit" else None, s.family,
                          configs[m].distill_lambda)
        if t is not None:
            teachers[m] = t

    _, plan, images, labels = _load_corpus(cfg["data"], cfg, int(cfg["image_size"]))
    n_folds = int(cfg.get("folds") or len(plan.folds))
    if not 1 <= n_folds <= len(plan.folds):
        raise UsageError(f"--folds must be in 1..{len(plan.folds)}")
    result = E.sweep(plan, images, labels, models, configs, fractions=fractions,
                     folds=range(n_folds), seed=int(cfg["seed"]), teachers=teachers,
                     jobs=args.jobs, image_size=int(cfg["image_size"]))
    out = _out_dir(args.out)
    result.write(out)
    C.dump({**cfg, "command": "sweep"}, out / "config.json")
    for row in result.summary():
        print(f"{row['model']:>14s}  f={row['fraction']:.1f}  AUROC {row['auroc_mean']:.4f}")
    if result.failed:
        print(f"{len(result.failed)} cell(s) failed; see grid.csv", file=sys.stderr)
        return 2
    return 0


def cmd_params(args) -> int:
    names = args.model or list(PAPER_PRESETS)
    rows = []
    for name in names:
        try:
            spec = M.get_spec(name, num_classes=args.num_classes)
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from None
        rows.append((name, M.parameter_count(M.build(spec, materialize=False))))
    width = max(len(n) for n, _ in rows)
    for name, count in rows:
        print(f"{name:<{width}s}  {count:>11d}  {count / 1e6:.2f}")
    return 0


def cmd_saliency(args) -> int:
    model = M.load(args.checkpoint)
    if args.method == "attention" and not model.spec.is_transformer:
        raise UsageError("attention maps need a vit/deit checkpoint")
    if args.method == "grad_cam" and model.spec.family != "densenet":
        raise UsageError("grad_cam needs a densenet checkpoint")
    image = D.read_pgm(args.image)
    size = model.spec.input_shape[1:]
    x = image if image.shape == size else D.resize(image, size)
    if args.method == "attention":
        smap = S.model_attention_map(model, x, query=args.query)
    else:
        target = args.target_class
        if target is None:
            logits, _ = M.predict_logits(model, TR.prepare(x[None], model))
            target = int(np.argmax(logits[0]))
        smap = S.grad_cam(model, x, target)
    values = smap.values if image.shape == size else S.normalize(np.maximum(D.resize(smap.values, image.shape), 0))
    paths = S.export_overlay(image, values, args.out)
    print(" ".join(str(p) for p in paths.values()))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cxrvit", description="Synthetic chest-radiograph ViT/DeiT/DenseNet harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--size", type=int, default=None, help="image side in pixels")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model on one fold")
    t.add_argument("--model")
    t.add_argument("--data")
    t.add_argument("--config")
    t.add_argument("--teacher", help="teacher checkpoint for deit students")
    t.add_argument("--fold", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--distill-lambda", type=float)
    t.add_argument("--paper-scale", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--model", help="expected preset; mismatch is an error")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--policy", choices=("u_ones", "u_zeros"))
    e.add_argument("--threshold", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="train-fraction sweep over folds")
    w.add_argument("--data")
    w.add_argument("--models", nargs="+")
    w.add_argument("--fractions", nargs="+", type=float)
    w.add_argument("--folds", type=int, help="use the first N folds")
    w.add_argument("--config")
    w.add_argument("--teacher")
    w.add_argument("--seed", type=int)
    w.add_argument("--epochs", type=int)
    w.add_argument("--lr", type=float)
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--paper-scale", action="store_true")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("params", help="print trainable-parameter counts")
    c.add_argument("--model", nargs="+")
    c.add_argument("--num-classes", type=int, default=5)
    c.set_defaults(func=cmd_params)

    g = sub.add_parser("saliency", help="export a saliency map and overlay")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--method", choices=("attention", "grad_cam"), required=True)
    g.add_argument("--class", dest="target_class", type=int)
    g.add_argument("--query", choices=("class", "distillation"), default="class")
    g.add_argument("--out", required=True, help="output path stem")
    g.set_defaults(func=cmd_saliency)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, ParseError, PlanningError, ContractError, OSError, ValueError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
