"""
Class and group prototypes on a blob mixture
============================================

Each class is drawn from two blobs. A small classifier supplies the
feature space, average-linkage clustering splits each class into K
groups, and the prototypes are plain means in that space.
"""

# %%
import numpy as np

from protoexpand import ClassifierTraining, build_prototypes, mixture_dataset, train_extractor
from protoexpand.prototypes import dist_class, dist_group

data = mixture_dataset(num_classes=3, clusters_per_class=2, n_per_class=40, spread=0.3, seed=0)
print(f"{len(data)} samples, classes {data.classes}")

# %%
# The extractor is the penultimate layer of a trained classifier.
ext = train_extractor(data.x, data.y, ClassifierTraining(epochs=80), np.random.default_rng(0))
print(f"extractor train accuracy {ext.train_accuracy:.3f}, feature dim {ext.feature_dim}")

# %%
# K=2 should recover the two blobs inside every class.
protos = build_prototypes(data.x, data.y, ext, K=2)
for c, p in protos.classes.items():
    xs = data.x[data.y == c]
    centres = [xs[p.members == j].mean(0).round(2) for j in range(p.K)]
    print(f"class {c}: group sizes {p.group_sizes}, input-space centres {centres}")

# %%
# Distances from a few samples to their own class prototypes.
feats = ext.features(data.x[:5])
for f, c in zip(feats, data.y[:5]):
    p = protos.classes[int(c)]
    d_g, j = dist_group(f, p.p_g)
    print(f"label {c}: class distance {dist_class(f, p.p_c):.3f}, nearest-by-angle group {j} at {d_g:.3f}")
