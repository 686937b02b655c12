"""Learned discriminative whitening (Lw) and the PCA-whitening baseline."""
from dataclasses import dataclass
from pathlib import Path
import struct
from typing import Dict, List, Tuple

import numpy as np

from .numerics import inv_sqrt_psd, l2_normalize, sym_eig

WHITENING_MAGIC = b"GEMW"


@dataclass
class LabeledPairSet:
    pairs: List[Tuple[int, int, int]]     # (id_i, id_j, label)
    descriptors: Dict[int, np.ndarray]

    def __post_init__(self):
        for i, j, y in self.pairs:
            if i not in self.descriptors or j not in self.descriptors:
                raise KeyError(f"pair ({i}, {j}) references an unknown descriptor")
            if y not in (0, 1):
                raise ValueError(f"pair label must be 0 or 1, got {y!r}")

    def differences(self, label: int) -> np.ndarray:
        rows = [np.asarray(self.descriptors[i]) - np.asarray(self.descriptors[j])
                for i, j, y in self.pairs if y == label]
        return np.array(rows)


@dataclass
class WhiteningTransform:
    mean: np.ndarray        # (K,)
    projection: np.ndarray  # (K, D); applied as P.T @ (v - mean)

    @property
    def in_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]


def _pair_cov(pairs: LabeledPairSet, label: int, what: str):
    d = pairs.differences(label)
    if len(d) == 0:
        raise ValueError(f"no {what} pairs to estimate the covariance from")
    return d.T @ d / len(d)


def intraclass_cov(pairs: LabeledPairSet):
    """Mean outer product of matching-pair differences."""
    return _pair_cov(pairs, 1, "matching")


def interclass_cov(pairs: LabeledPairSet):
    """Mean outer product of non-matching-pair differences."""
    return _pair_cov(pairs, 0, "non-matching")


def learn_lw(pairs: LabeledPairSet, out_dim: int) -> WhiteningTransform:
    """Whiten by the matching-pair covariance, then rotate to the top
    ``out_dim`` principal directions of the whitened non-matching covariance.

    Eigenvalues of the matching covariance are floored at
    ``1e-6 * trace / K`` so rank-deficient pair sets stay invertible.
    """
    cs = intraclass_cov(pairs)
    cd = interclass_cov(pairs)
    k = cs.shape[0]
    if not 1 <= out_dim <= k:
        raise ValueError(f"target dimension {out_dim} outside [1, {k}]")
    floor = max(1e-6 * np.trace(cs) / k, 1e-300)
    w = inv_sqrt_psd(cs, floor)
    _, rot = sym_eig(w @ cd @ w)
    proj = w @ rot[:, :out_dim]
    ids = sorted({i for i, j, _ in pairs.pairs} | {j for _, j, _ in pairs.pairs})
    mean = np.mean([pairs.descriptors[i] for i in ids], axis=0)
    return WhiteningTransform(mean, proj)


def learn_pcaw(descriptors, out_dim: int) -> WhiteningTransform:
    x = np.asarray(list(descriptors.values()) if isinstance(descriptors, dict)
                   else descriptors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("PCA whitening needs at least two descriptors")
    k = x.shape[1]
    if not 1 <= out_dim <= k:
        raise ValueError(f"target dimension {out_dim} outside [1, {k}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    vals, vecs = sym_eig(cov)
    floor = max(1e-10 * np.trace(cov) / k, 1e-300)
    scale = 1.0 / np.sqrt(np.maximum(vals[:out_dim], floor))
    return WhiteningTransform(mean, vecs[:, :out_dim] * scale)


def apply_whitening(t: WhiteningTransform, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != t.mean.shape:
        raise ValueError(f"descriptor dim {v.shape} does not match transform {t.mean.shape}")
    return l2_normalize(t.projection.T @ (v - t.mean))


def save_whitening(t: WhiteningTransform, path) -> None:
    k, d = t.projection.shape
    with open(path, "wb") as fh:
        fh.write(WHITENING_MAGIC + struct.pack("<II", k, d))
        fh.write(np.asarray(t.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(t.projection, dtype="<f4").tobytes())


def load_whitening(path) -> WhiteningTransform:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != WHITENING_MAGIC:
        raise ValueError(f"{path}: missing GEMW header")
    k, d = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * (k + k * d)
    if len(data) != expected or d > k or d == 0:
        raise ValueError(f"{path}: header K={k} D={d} does not match {len(data)} bytes")
    body = np.frombuffer(data[12:], dtype="<f4").astype(np.float64)
    return WhiteningTransform(body[:k].copy(), body[k:].reshape(k, d).copy())
