"""Pairwise contrastive loss and the triplet baseline, on normalized descriptors."""
from dataclasses import dataclass

import numpy as np


@dataclass
class LossConfig:
    margin: float = 0.75
    triplet_margin: float = 0.1

    def __post_init__(self):
        if self.margin <= 0 or self.triplet_margin <= 0:
            raise ValueError("margins must be positive")


def _diff(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a - b


def _check_label(y):
    if y not in (0, 1):
        raise ValueError(f"pair label must be 0 or 1, got {y!r}")


def contrastive_loss(fi, fj, y: int, cfg: LossConfig) -> float:
    _check_label(y)
    d = _diff(fi, fj)
    dist = float(np.linalg.norm(d))
    if y == 1:
        return 0.5 * dist ** 2
    return 0.5 * max(0.0, cfg.margin - dist) ** 2


def contrastive_grad(fi, fj, y: int, cfg: LossConfig):
    """Gradients w.r.t. ``fi`` and ``fj``.

    For a non-matching pair with coincident descriptors the subgradient 0 is
    returned.
    """
    _check_label(y)
    d = _diff(fi, fj)
    if y == 1:
        return d, -d
    dist = np.linalg.norm(d)
    if dist >= cfg.margin or dist == 0.0:
        return np.zeros_like(d), np.zeros_like(d)
    g = -(cfg.margin - dist) * d / dist
    return g, -g


def triplet_loss(fq, fpos, fneg, cfg: LossConfig) -> float:
    dp = _diff(fq, fpos)
    dn = _diff(fq, fneg)
    return max(0.0, float(dp @ dp - dn @ dn) + cfg.triplet_margin)


def triplet_grad(fq, fpos, fneg, cfg: LossConfig):
    dp = _diff(fq, fpos)
    dn = _diff(fq, fneg)
    if float(dp @ dp - dn @ dn) + cfg.triplet_margin <= 0:
        z = np.zeros_like(dp)
        return z, z.copy(), z.copy()
    return 2 * (dp - dn), -2 * dp, 2 * dn
