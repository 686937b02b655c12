"""
Learned whitening and query expansion
=====================================

Descriptors are post-processed with a whitening learned from matching and
non-matching pairs (Lw), compared with plain PCA whitening, and re-ranked
with alpha-weighted query expansion.
"""

import numpy as np

from gemret import learn_lw, learn_pcaw
from gemret.retrieval import DescriptorIndex, QEConfig, mean_average_precision
from gemret.whitening import LabeledPairSet, apply_whitening

# clustered toy descriptors: a shared nuisance direction dominates the variance
rng = np.random.default_rng(0)
centers = rng.normal(size=(10, 16))
nuisance = rng.normal(size=16)
ids, labels, raw = [], [], []
for c in range(10):
    for _ in range(8):
        v = centers[c] + 0.6 * rng.normal(size=16) + 4 * rng.normal() * nuisance
        ids.append(len(ids))
        labels.append(c)
        raw.append(v / np.linalg.norm(v))
descs = dict(zip(ids, raw))
labels = np.array(labels)

# pairs from the first five classes train the whitening; the rest are held out
train = [i for i in ids if labels[i] < 5]
pairs = [(a, b, int(labels[a] == labels[b])) for a in train for b in train if a < b]
lw = learn_lw(LabeledPairSet(pairs, descs), 12)
pcaw = learn_pcaw({i: descs[i] for i in train}, 12)

held = [i for i in ids if labels[i] >= 5]
truth = {i: [j for j in held if labels[j] == labels[i] and j != i] for i in held}


def score(transform=None, qe=None, method="alpha"):
    vecs = {i: apply_whitening(transform, descs[i]) if transform else descs[i] for i in held}
    index = DescriptorIndex.from_dict(vecs)
    return mean_average_precision(index, vecs, truth, qe, method)


print(f"raw descriptors  mAP {score():.3f}")
print(f"PCA whitening    mAP {score(pcaw):.3f}")
print(f"learned (Lw)     mAP {score(lw):.3f}")
print(f"Lw + AQE(5)      mAP {score(lw, QEConfig(nqe=5), 'average'):.3f}")
print(f"Lw + aQE(3, 5)   mAP {score(lw, QEConfig(nqe=5, alpha=3)):.3f}")
