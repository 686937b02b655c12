"""Training-tuple mining from a 3D-reconstruction visibility graph.

Positive strategies: ``m1`` (nearest descriptor in the camera pool),
``m2`` (most co-observed points) and ``m3`` (random pick among candidates
passing overlap and scale-change thresholds).  Negative strategies: ``N1``
(nearest non-matching descriptors) and ``N2`` (same, at most one image per
cluster).
"""
from dataclasses import dataclass, field
import json
import math
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence

import numpy as np


class NoValidPositive(ValueError):
    pass


class NotEnoughNegatives(ValueError):
    pass


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    id: int
    cluster: int
    camera: tuple
    file: str = ""


class VisibilityGraph:
    """Bipartite image/point graph; immutable after construction."""

    def __init__(self, images: Sequence[ImageRecord], points: Mapping[int, Sequence[float]],
                 edges):
        self.images: Dict[int, ImageRecord] = {}
        for rec in images:
            if rec.id in self.images:
                raise GraphError(f"duplicate image id {rec.id}")
            self.images[rec.id] = rec
        self.points = {int(k): np.asarray(v, dtype=np.float64) for k, v in points.items()}
        obs = {i: set() for i in self.images}
        edge_set = set()
        for i, p in edges:
            i, p = int(i), int(p)
            if i not in self.images:
                raise GraphError(f"edge references unknown image {i}")
            if p not in self.points:
                raise GraphError(f"edge references unknown point {p}")
            obs[i].add(p)
            edge_set.add((i, p))
        self.edges = frozenset(edge_set)
        self._obs: Dict[int, FrozenSet[int]] = {i: frozenset(s) for i, s in obs.items()}
        clusters: Dict[int, List[int]] = {}
        for i in sorted(self.images):
            clusters.setdefault(self.images[i].cluster, []).append(i)
        self.clusters = clusters

    def __contains__(self, i):
        return i in self.images

    def cluster_of(self, i: int) -> int:
        return self._record(i).cluster

    def camera(self, i: int) -> np.ndarray:
        return np.asarray(self._record(i).camera, dtype=np.float64)

    def _record(self, i):
        try:
            return self.images[i]
        except KeyError:
            raise KeyError(f"unknown image id {i}") from None

    def subgraph(self, clusters) -> "VisibilityGraph":
        keep = set(clusters)
        imgs = [r for r in self.images.values() if r.cluster in keep]
        ids = {r.id for r in imgs}
        edges = [(i, p) for i, p in self.edges if i in ids]
        return VisibilityGraph(imgs, self.points, edges)

    # -- serialization
    def to_json(self) -> dict:
        return {
            "images": [{"id": r.id, "cluster": r.cluster, "camera": list(map(float, r.camera)),
                        "file": r.file} for r in sorted(self.images.values(), key=lambda r: r.id)],
            "points": [{"id": k, "xyz": [float(c) for c in self.points[k]]}
                       for k in sorted(self.points)],
            "edges": [[i, p] for i, p in sorted(self.edges)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VisibilityGraph":
        try:
            images = [ImageRecord(int(r["id"]), int(r["cluster"]),
                                  tuple(float(c) for c in r["camera"]), r.get("file", ""))
                      for r in doc["images"]]
            points = {}
            for r in doc["points"]:
                if int(r["id"]) in points:
                    raise GraphError(f"duplicate point id {r['id']}")
                points[int(r["id"])] = r["xyz"]
            edges = [(int(i), int(p)) for i, p in doc["edges"]]
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed visibility graph: {exc}") from exc
        if any(i < 0 for i in [r.id for r in images] + list(points)):
            raise GraphError("ids must be non-negative")
        return cls(images, points, edges)


def load_graph(path) -> VisibilityGraph:
    with open(path) as fh:
        return VisibilityGraph.from_json(json.load(fh))


def save_graph(g: VisibilityGraph, path) -> None:
    Path(path).write_text(json.dumps(g.to_json(), indent=1) + "\n")


@dataclass
class MiningConfig:
    pool_size: int = 100
    inlier_overlap: float = 0.2
    scale_threshold: float = 1.5
    negatives_per_tuple: int = 5
    negative_strategy: str = "N2"
    positive_strategy: str = "m3"
    extra_negative_candidates_per_model: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.pool_size < 1 or self.negatives_per_tuple < 1:
            raise ValueError("pool_size and negatives_per_tuple must be positive")
        if not 0 < self.inlier_overlap <= 1:
            raise ValueError("inlier_overlap must lie in (0, 1]")
        if self.scale_threshold < 1:
            raise ValueError("scale_threshold must be >= 1")
        if self.extra_negative_candidates_per_model < 0:
            raise ValueError("extra_negative_candidates_per_model must be >= 0")
        if self.negative_strategy not in ("N1", "N2"):
            raise ValueError(f"unknown negative strategy {self.negative_strategy!r}")
        if self.positive_strategy not in ("m1", "m2", "m3"):
            raise ValueError(f"unknown positive strategy {self.positive_strategy!r}")


@dataclass
class TrainingTuple:
    query: int
    positive: int
    negatives: List[int]
    meta: dict = field(default_factory=dict)


def observed_points(g: VisibilityGraph, i: int) -> FrozenSet[int]:
    if i not in g.images:
        raise KeyError(f"unknown image id {i}")
    return g._obs[i]


def positive_pool(g: VisibilityGraph, q: int, k: int) -> List[int]:
    """Up to ``k`` same-cluster images with the closest camera centers."""
    cq = g.camera(q)
    members = [i for i in g.clusters[g.cluster_of(q)] if i != q]
    dists = [float(np.linalg.norm(g.camera(i) - cq)) for i in members]
    order = sorted(zip(dists, members))
    return [i for _, i in order[:k]]


def scale_change(g: VisibilityGraph, i: int, q: int) -> float:
    """Ratio (>= 1) of mean camera-to-shared-point distances of two images."""
    shared = observed_points(g, i) & observed_points(g, q)
    if not shared:
        raise ValueError(f"images {i} and {q} co-observe no points")
    pts = np.array([g.points[p] for p in sorted(shared)])
    di = np.linalg.norm(pts - g.camera(i), axis=1).mean()
    dq = np.linalg.norm(pts - g.camera(q), axis=1).mean()
    return float(max(di / dq, dq / di))


def select_positive_m1(g, q, pool, descriptors) -> int:
    if not pool:
        raise NoValidPositive(f"empty positive pool for query {q}")
    fq = np.asarray(descriptors[q])
    scored = sorted((float(np.linalg.norm(fq - np.asarray(descriptors[i]))), i) for i in pool)
    return scored[0][1]


def select_positive_m2(g, q, pool) -> int:
    if not pool:
        raise NoValidPositive(f"empty positive pool for query {q}")
    pq = observed_points(g, q)
    scored = sorted((-len(pq & observed_points(g, i)), i) for i in pool)
    return scored[0][1]


def m3_candidates(g, q, pool, cfg: MiningConfig) -> List[int]:
    pq = observed_points(g, q)
    out = []
    if not pq:
        return out
    for i in pool:
        shared = len(observed_points(g, i) & pq)
        if shared / len(pq) >= cfg.inlier_overlap and shared and \
                scale_change(g, i, q) <= cfg.scale_threshold:
            out.append(i)
    return out


def _rng(*keys):
    return np.random.default_rng([int(k) for k in keys])


def select_positive_m3(g, q, pool, cfg: MiningConfig, rng=None) -> int:
    valid = sorted(m3_candidates(g, q, pool, cfg))
    if not valid:
        raise NoValidPositive(f"no m3 positive for query {q}")
    if rng is None:
        rng = _rng(cfg.seed, q, 3)
    return valid[int(rng.integers(len(valid)))]


def select_positive(g, q, descriptors, cfg: MiningConfig):
    """Apply the configured strategy; returns ``(positive, meta)``."""
    pool = positive_pool(g, q, cfg.pool_size)
    meta = {}
    if cfg.positive_strategy == "m1":
        pos = select_positive_m1(g, q, pool, descriptors)
    elif cfg.positive_strategy == "m2":
        pos = select_positive_m2(g, q, pool)
        if not observed_points(g, q) & observed_points(g, pos):
            meta["zero_overlap_positive"] = True
    else:
        pos = select_positive_m3(g, q, pool, cfg)
    return pos, meta


def mine_negatives(g, q, candidates, descriptors, cfg: MiningConfig) -> List[int]:
    cq = g.cluster_of(q)
    eligible = sorted({i for i in candidates if g.cluster_of(i) != cq})
    need = cfg.negatives_per_tuple
    if eligible:
        fq = np.asarray(descriptors[q])
        mat = np.array([descriptors[i] for i in eligible])
        scores = mat @ fq
        order = np.lexsort((np.array(eligible), -scores))
        ranked = [eligible[j] for j in order]
    else:
        ranked = []
    if cfg.negative_strategy == "N1":
        chosen = ranked[:need]
    else:
        chosen, seen = [], set()
        for i in ranked:
            c = g.cluster_of(i)
            if c in seen:
                continue
            seen.add(c)
            chosen.append(i)
            if len(chosen) == need:
                break
    if len(chosen) < need:
        raise NotEnoughNegatives(
            f"query {q}: only {len(chosen)} of {need} negatives available "
            f"under {cfg.negative_strategy} (shortfall {need - len(chosen)})")
    return chosen


def queries_per_cluster(size: int, budget: Optional[int] = None) -> int:
    if budget is not None:
        return min(budget, size)
    return min(math.ceil(0.10 * size), 30, size)


@dataclass
class MiningReport:
    epoch: int
    queries: int
    skipped: List[int]


class TupleMiner:
    """Holds the positives (fixed at construction) and samples epoch tuples.

    ``query_clusters`` are the clusters queries are drawn from; negatives may
    come from any cluster of ``graph``.
    """

    def __init__(self, graph: VisibilityGraph, cfg: MiningConfig, initial_descriptors=None,
                 query_clusters=None, query_budget: Optional[int] = None):
        self.graph = graph
        self.cfg = cfg
        self.query_budget = query_budget
        self.query_clusters = sorted(query_clusters if query_clusters is not None
                                     else graph.clusters)
        if cfg.positive_strategy == "m1" and initial_descriptors is None:
            raise ValueError("m1 positives need the initial descriptors")
        self.positives: Dict[int, Optional[int]] = {}
        self.meta: Dict[int, dict] = {}
        for c in self.query_clusters:
            for q in graph.clusters[c]:
                try:
                    pos, meta = select_positive(graph, q, initial_descriptors, cfg)
                except NoValidPositive:
                    pos, meta = None, {}
                self.positives[q] = pos
                self.meta[q] = meta

    def sample_queries(self, epoch: int) -> List[int]:
        out = []
        for c in self.query_clusters:
            members = self.graph.clusters[c]
            n = queries_per_cluster(len(members), self.query_budget)
            pick = _rng(self.cfg.seed, epoch, c, 0).choice(len(members), size=n, replace=False)
            out.extend(members[j] for j in sorted(pick))
        return out

    def candidate_negatives(self, queries: Sequence[int], epoch: int) -> List[int]:
        chosen = set()
        for q in queries:
            if self.positives.get(q) is not None:
                chosen.add(q)
                chosen.add(self.positives[q])
        extra = self.cfg.extra_negative_candidates_per_model
        for c in sorted(self.graph.clusters):
            rest = [i for i in self.graph.clusters[c] if i not in chosen]
            if extra and rest:
                n = min(extra, len(rest))
                pick = _rng(self.cfg.seed, epoch, c, 1).choice(len(rest), size=n, replace=False)
                chosen.update(rest[j] for j in pick)
        return sorted(chosen)

    def mine(self, queries: Sequence[int], descriptors, epoch: int):
        """Tuples for ``queries`` with negatives from ``descriptors``."""
        candidates = self.candidate_negatives(queries, epoch)
        tuples, skipped = [], []
        for q in queries:
            pos = self.positives.get(q)
            if pos is None:
                skipped.append(q)
                continue
            negs = mine_negatives(self.graph, q, candidates, descriptors, self.cfg)
            tuples.append(TrainingTuple(q, pos, negs, dict(self.meta[q])))
        return tuples, MiningReport(epoch, len(queries), skipped)


def build_epoch_tuples(g: VisibilityGraph, descriptors, cfg: MiningConfig,
                       query_budget: Optional[int] = None, epoch: int = 0,
                       miner: Optional[TupleMiner] = None):
    """One epoch of tuples; returns ``(tuples, report)``.

    Pass a persistent ``miner`` to keep positives fixed across epochs; without
    one, positives are selected from ``descriptors``.
    """
    if miner is None:
        miner = TupleMiner(g, cfg, descriptors, query_budget=query_budget)
    return miner.mine(miner.sample_queries(epoch), descriptors, epoch)
