"""
One forward pass, stage by stage
================================

Build a fusion model by hand, push a random bag through it and look at
the intermediate shapes and attention maps.
"""

import numpy as np

from emmpd import autodiff as ad
from emmpd.fusion import FusionConfig, FusionModel, knn_graph

rng = np.random.default_rng(0)
K, d, C, t = 12, 16, 3, 4

# patches on two slides, scattered over an 8x8 grid
cells = rng.choice(64, K, replace=False)
slide = rng.integers(0, 2, K)
gx, gy = cells % 8, cells // 8
features = rng.standard_normal((K, d))

graph = knn_graph(slide, gx, gy, k=4)
print("adjacency symmetric:", np.array_equal(graph.adjacency, graph.adjacency.T))
print("edges per node:", graph.adjacency.sum(1).astype(int))

model = FusionModel(FusionConfig(d, C, t, heads=4), rng.standard_normal((C, d)),
                    rng.uniform(-0.02, 0.02, (t, d)), seed=0)
logits, trace = model.forward(features, graph)
print(trace.report())

# one gradient step moves the learnable prompts but never the frozen rows
frozen = model.frozen_text.copy()
opt = ad.Adam(model.params(), lr=1e-2)
with ad.Tape() as tape:
    loss = ad.focal_bce(model.forward(features, graph)[0], np.array([1, 0, 1]))
tape.backward(loss, model.params())
before = model.prompts.value.copy()
opt.step()
print("prompt change:", np.abs(model.prompts.value - before).max())
print("frozen change:", np.abs(model.frozen_text - frozen).max())

# reorder the patches consistently and the logits do not move
perm = rng.permutation(K)
moved = model.forward(features[perm], knn_graph(slide[perm], gx[perm], gy[perm], k=4))[0]
print("max logit change under permutation:", np.abs(moved.value - model.forward(features, graph)[0].value).max())
