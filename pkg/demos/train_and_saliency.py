"""Train a tiny DenseNet on synthetic data, score it and look at where it looks.

    python demos/train_and_saliency.py [out_dir]

Writes Grad-CAM overlays (PGM) for a few held-out positives to out_dir.
"""

import sys
from pathlib import Path

import numpy as np

from cxrvit import data as D
from cxrvit import evaluation as E
from cxrvit import models as M
from cxrvit import saliency as S
from cxrvit import training as TR

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

images, records = D.synth_generate(1200, seed=5)
labels = D.label_matrix(D.apply_policy(records))
print("label prevalence:", np.round(labels.mean(0), 3))

fold = TR.FoldData(images[:800], labels[:800], images[800:1000], labels[800:1000])
cfg = TR.TrainConfig(lr_init=3e-3, max_epochs=6, warmup_epochs=1, batch_size=32, weight_decay=1e-4,
                     augment=D.AugmentConfig(), distill_lambda=0.0)
model, history = TR.train(M.build("cnn-tiny", seed=0), fold, cfg)
for epoch, tl, vl in zip(history.epochs, history.train_loss, history.val_loss):
    print(f"epoch {epoch}: train {tl:.4f}  val {vl:.4f}")

report = E.evaluate(model, images[1000:], labels[1000:])
for name, auc, f1 in zip(D.CLASSES, report.per_class_auroc, report.per_class_f1):
    print(f"{name:<18s} AUROC {auc:.3f}  F1 {f1:.3f}")
print(f"weighted AUROC {report.weighted_auroc:.3f}")

# Grad-CAM for the first held-out positive of each class
synth = D.SynthConfig()
for k, name in enumerate(D.CLASSES):
    i = 1000 + int(np.flatnonzero(labels[1000:, k])[0])
    smap = S.grad_cam(model, images[i], k)
    rs, cs = synth.region_slices(k)
    inside = smap.values[rs, cs].mean()
    paths = S.export_overlay(images[i], smap, out / f"{name.lower().replace(' ', '_')}_{i}")
    print(f"{name}: mean saliency {inside:.2f} in its region vs {smap.values.mean():.2f} overall -> {paths['overlay']}")
