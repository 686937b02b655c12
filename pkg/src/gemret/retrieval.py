"""Exhaustive inner-product search, multi-scale descriptors, query expansion
and mAP evaluation."""
from dataclasses import dataclass
from pathlib import Path
import struct
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .backbone import rescale, resize_max_side
from .numerics import l2_normalize
from .pooling import PoolingConfig, extract_descriptor
from .whitening import WhiteningTransform, apply_whitening

INDEX_MAGIC = b"GEMI"
DEFAULT_SCALES = (1.0, 1.0 / np.sqrt(2.0), 0.5)


@dataclass
class QEConfig:
    nqe: int = 50
    alpha: float = 3.0

    def __post_init__(self):
        if self.nqe < 0 or self.alpha < 0:
            raise ValueError("nqe and alpha must be non-negative")


@dataclass
class RankedList:
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)


class DescriptorIndex:
    def __init__(self, ids: Sequence[int], vectors, dim: Optional[int] = None):
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.size == 0:
            if dim is None:
                raise ValueError("empty index needs an explicit dim")
            vectors = vectors.reshape(0, dim)
        if vectors.ndim != 2 or len(vectors) != len(self.ids):
            raise ValueError("need one descriptor row per id")
        self.vectors = vectors
        self.dim = vectors.shape[1]

    @classmethod
    def from_dict(cls, descriptors: Mapping[int, np.ndarray]) -> "DescriptorIndex":
        ids = sorted(descriptors)
        return cls(ids, [descriptors[i] for i in ids])

    def __len__(self):
        return len(self.ids)

    def vector(self, image_id: int) -> np.ndarray:
        hit = np.flatnonzero(self.ids == image_id)
        if hit.size == 0:
            raise KeyError(f"image {image_id} not in index")
        return self.vectors[hit[0]]

    def without(self, image_id: int) -> "DescriptorIndex":
        keep = self.ids != image_id
        return DescriptorIndex(self.ids[keep], self.vectors[keep], self.dim)


def _rank(ids, scores) -> RankedList:
    order = np.lexsort((ids, -scores))
    return RankedList(ids[order], scores[order])


def search(index: DescriptorIndex, q) -> RankedList:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dim {q.shape} does not match index dim {index.dim}")
    return _rank(index.ids, index.vectors @ q)


def _check_nonempty(index):
    if len(index) == 0:
        raise ValueError("query expansion on an empty index")


def _expand(index, q, top_ids, weights):
    rows = np.array([index.vector(i) for i in top_ids]).reshape(len(top_ids), index.dim)
    return l2_normalize(np.asarray(q, dtype=np.float64) + weights @ rows)


def average_qe(index: DescriptorIndex, q, initial: RankedList, cfg: QEConfig) -> RankedList:
    """Re-query with the query plus its top ``nqe`` neighbours, all weight 1."""
    _check_nonempty(index)
    top = initial.ids[:cfg.nqe]
    return search(index, _expand(index, q, top, np.ones(len(top))))


def alpha_qe(index: DescriptorIndex, q, initial: RankedList, cfg: QEConfig) -> RankedList:
    """Neighbour ``i`` is weighted by ``max(0, q . f_i) ** alpha``."""
    _check_nonempty(index)
    top = initial.ids[:cfg.nqe]
    sims = np.array([index.vector(i) @ np.asarray(q) for i in top])
    weights = np.maximum(sims, 0.0) ** cfg.alpha
    return search(index, _expand(index, q, top, weights))


def average_precision(ranked_ids: Iterable[int], relevant) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("average precision needs at least one relevant item")
    hits, total = 0, 0.0
    for rank, i in enumerate(ranked_ids, start=1):
        if i in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def rank_queries(index: DescriptorIndex, queries: Mapping[int, np.ndarray],
                 qe: Optional[QEConfig] = None, method: str = "alpha") -> Dict[int, RankedList]:
    """Ranked list per query; the query's own id is excluded from the database."""
    out = {}
    for qid in sorted(queries):
        db = index.without(qid)
        q = queries[qid]
        ranked = search(db, q)
        if qe is not None:
            expand = alpha_qe if method == "alpha" else average_qe
            ranked = expand(db, q, ranked, qe)
        out[qid] = ranked
    return out


def per_query_ap(index, queries, gt: Mapping[int, Iterable[int]], qe=None, method="alpha"):
    missing = [q for q in sorted(queries) if q not in gt]
    if missing:
        raise KeyError(f"no ground truth for query {missing[0]}")
    ranked = rank_queries(index, queries, qe, method)
    return {q: average_precision(r.ids, gt[q]) for q, r in ranked.items()}, ranked


def mean_average_precision(index, queries, gt, qe: Optional[QEConfig] = None,
                           method: str = "alpha") -> float:
    aps, _ = per_query_ap(index, queries, gt, qe, method)
    return float(np.mean(list(aps.values())))


def generalized_mean(vectors, p: float):
    """Componentwise power mean of non-negative rows, overflow-safe."""
    v = np.asarray(vectors, dtype=np.float64)
    m = v.max(axis=0)
    safe = np.where(m > 0, m, 1.0)
    out = safe * np.mean((v / safe) ** p, axis=0) ** (1.0 / p)
    return np.where(m > 0, out, 0.0)


def multiscale_descriptor(net, cfg: PoolingConfig, img, scales=DEFAULT_SCALES,
                          max_side: Optional[int] = None, p: Optional[float] = None,
                          whitening: Optional[WhiteningTransform] = None):
    """Single-scale descriptors at each scale, merged by a power mean.

    The merge exponent defaults to the network's (shared) GeM exponent; whitening,
    if given, is applied to the merged descriptor.
    """
    scales = list(scales)
    if not scales or any(not 0 < s <= 1 for s in scales):
        raise ValueError("scales must be non-empty and lie in (0, 1]")
    if max_side:
        img = resize_max_side(img, max_side)
    descs = []
    for s in scales:
        im = img if s == 1 else rescale(img, s)
        oh, ow = net.output_shape(*im.shape[:2])
        if oh < 1 or ow < 1:
            raise ValueError(f"image too small at scale {s:g} "
                             f"({im.shape[1]}x{im.shape[0]})")
        descs.append(extract_descriptor(net, cfg, im))
    if len(descs) == 1:
        out = descs[0]
    else:
        out = l2_normalize(generalized_mean(descs, cfg.shared_p if p is None else p))
    if whitening is not None:
        out = apply_whitening(whitening, out)
    return out


# ---------------------------------------------------------------- files

def save_index(index: DescriptorIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<II", index.dim, len(index)))
        for i, v in zip(index.ids, index.vectors):
            fh.write(struct.pack("<Q", int(i)))
            fh.write(np.asarray(v, dtype="<f4").tobytes())


def load_index(path) -> DescriptorIndex:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != INDEX_MAGIC:
        raise ValueError(f"{path}: missing GEMI header")
    dim, count = struct.unpack("<II", data[4:12])
    entry = 8 + 4 * dim
    if len(data) != 12 + count * entry:
        raise ValueError(f"{path}: header dim={dim} count={count} does not match "
                         f"{len(data)} bytes")
    rec = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    arr = np.frombuffer(data[12:], dtype=rec)
    return DescriptorIndex(arr["id"].astype(np.int64), arr["v"].astype(np.float64), dim)


def write_ranked_lists(ranked: Mapping[int, RankedList], path) -> None:
    with open(path, "w") as fh:
        for qid in sorted(ranked):
            r = ranked[qid]
            for rank, (i, s) in enumerate(zip(r.ids, r.scores), start=1):
                fh.write(f"{qid} {int(i)} {rank} {s:.6f}\n")
