"""Parameter counts of the full-size presets and a gradient check on a tiny DeiT.

    python demos/params_and_gradients.py
"""

import numpy as np

from cxrvit import models as M
from cxrvit import tensor as T
from cxrvit.tensor import Tensor

# Counting needs only shapes, so the large presets are built without allocating weights.
for name in ("densenet-121", "densenet-201", "vit-s", "vit-b", "deit-s", "deit-b"):
    count = M.parameter_count(M.build(M.get_spec(name), materialize=False))
    print(f"{name:<13s} {count:>11,d}  ({count / 1e6:.2f} M)")

# A small float64 DeiT: compare backprop against central differences on a few weights.
spec = M.ModelSpec(family="deit", num_classes=3, input_shape=(3, 8, 8), depth=1, embed_dim=8, heads=2,
                   mlp_ratio=2.0, patch_size=4)
model = M.build(spec, seed=0, dtype=np.float64)
x = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
R = np.random.default_rng(1).standard_normal((2, 3))


def loss():
    out = model(x)
    return T.tsum((out.class_logits + out.dist_logits) * Tensor(R))


err = T.gradcheck(loss, model.parameters())
print(f"\nmax relative gradient error over {sum(p.size for p in model.parameters())} weights: {err:.1e}")
