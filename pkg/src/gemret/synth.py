"""Procedural planar scenes viewed through crops, with an exact visibility graph.

Each cluster is a textured unit square lying on the ``z = 0`` plane (clusters
are placed side by side along x).  Every image is an axis-aligned square crop
of its scene rendered at a fixed resolution; the camera sits above the crop
center at a height proportional to the crop size, so a tighter crop is a
closer camera.  A scene point is observed by an image exactly when it falls
inside the crop.  Photometric nuisances (per-channel gain and offset, a linear
illumination ramp and pixel noise) are drawn independently per image.
"""
from dataclasses import dataclass, field
import json
from pathlib import Path
from typing import Dict

import numpy as np

from .imageio import write_pnm
from .mining import ImageRecord, VisibilityGraph, save_graph

CLUSTER_SPACING = 3.0


@dataclass
class SynthConfig:
    clusters: int = 8
    images_min: int = 12
    images_max: int = 12
    points_per_cluster: int = 300
    camera_jitter: float = 0.01
    image_size: int = 40
    crop_min: float = 0.3
    crop_max: float = 0.6
    gratings: int = 3
    nuisance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.clusters, self.images_min, self.points_per_cluster, self.image_size) < 1:
            raise ValueError("synthetic dataset sizes must be positive")
        if self.images_max < self.images_min:
            raise ValueError("images_max < images_min")
        if not 0 < self.crop_min <= self.crop_max <= 1:
            raise ValueError("crop sizes must satisfy 0 < crop_min <= crop_max <= 1")


@dataclass
class SynthDataset:
    graph: VisibilityGraph
    images: Dict[int, np.ndarray]
    crops: Dict[int, tuple] = field(default_factory=dict)  # id -> (x0, y0, side)

    def manifest(self, root=".") -> dict:
        ids = sorted(self.images)
        gt = {}
        for i in ids:
            c = self.graph.cluster_of(i)
            gt[str(i)] = [j for j in self.graph.clusters[c] if j != i]
        return {
            "root": str(root),
            "entries": [{"id": i, "file": self.graph.images[i].file} for i in ids],
            "queries": ids,
            "ground_truth": gt,
        }


def _scene(rng, n_gratings):
    freq = rng.uniform(4.0, 14.0, n_gratings)
    angle = rng.uniform(0, np.pi, n_gratings)
    return {
        "k": np.stack([freq * np.cos(angle), freq * np.sin(angle)], axis=1),
        "phase": rng.uniform(0, 2 * np.pi, n_gratings),
        "amp": rng.uniform(0.5, 1.0, n_gratings),
    }


def _render(scene, x0, y0, side, size, rng, nuisance):
    t = (np.arange(size) + 0.5) / size
    u = x0 + side * t[None, :]
    v = y0 + side * t[:, None]
    tex = np.zeros((size, size))
    for (kx, ky), ph, a in zip(scene["k"], scene["phase"], scene["amp"]):
        tex += a * np.sin(2 * np.pi * (kx * u + ky * v) + ph)
    tex /= scene["amp"].sum()
    base = 0.5 + 0.3 * tex
    gain = 1.0 + nuisance * rng.uniform(-0.5, 0.5, 3)
    offset = nuisance * rng.uniform(-0.25, 0.25, 3)
    ramp_dir = rng.normal(size=2)
    ramp = nuisance * 0.2 * (ramp_dir[0] * (t[None, :] - 0.5) + ramp_dir[1] * (t[:, None] - 0.5))
    img = base[:, :, None] * gain + offset + ramp[:, :, None]
    img += nuisance * 0.03 * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    records, points, edges = [], {}, []
    images, crops = {}, {}
    next_img, next_pt = 0, 0
    for c in range(cfg.clusters):
        scene = _scene(rng, cfg.gratings)
        origin = np.array([CLUSTER_SPACING * c, 0.0])
        pts = rng.uniform(0, 1, size=(cfg.points_per_cluster, 2))
        pt_ids = list(range(next_pt, next_pt + len(pts)))
        for pid, (px, py) in zip(pt_ids, pts):
            points[pid] = [float(origin[0] + px), float(origin[1] + py), 0.0]
        next_pt += len(pts)
        n_img = int(rng.integers(cfg.images_min, cfg.images_max + 1))
        for _ in range(n_img):
            side = rng.uniform(cfg.crop_min, cfg.crop_max)
            x0, y0 = rng.uniform(0, 1 - side, 2)
            cam = np.array([origin[0] + x0 + side / 2, origin[1] + y0 + side / 2, 2.0 * side])
            cam += cfg.camera_jitter * rng.normal(size=3)
            iid = next_img
            next_img += 1
            images[iid] = _render(scene, x0, y0, side, cfg.image_size, rng, cfg.nuisance)
            crops[iid] = (float(x0), float(y0), float(side))
            records.append(ImageRecord(iid, c, tuple(float(v) for v in cam),
                                       f"images/{iid:05d}.ppm"))
            inside = (pts[:, 0] >= x0) & (pts[:, 0] <= x0 + side) & \
                     (pts[:, 1] >= y0) & (pts[:, 1] <= y0 + side)
            edges.extend((iid, pt_ids[j]) for j in np.flatnonzero(inside))
    return SynthDataset(VisibilityGraph(records, points, edges), images, crops)


def write_dataset(ds: SynthDataset, out_dir) -> Path:
    """Write images, ``graph.json`` and ``manifest.json``; returns the graph path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i, img in sorted(ds.images.items()):
        write_pnm(out / ds.graph.images[i].file, img)
    save_graph(ds.graph, out / "graph.json")
    (out / "manifest.json").write_text(json.dumps(ds.manifest("."), indent=1) + "\n")
    return out / "graph.json"


def load_images(graph: VisibilityGraph, root) -> Dict[int, np.ndarray]:
    from .imageio import read_pnm
    root = Path(root)
    return {i: read_pnm(root / rec.file) for i, rec in sorted(graph.images.items())}
