"""Siamese fine-tuning: tuple losses, backprop through the whole chain,
SGD/Adam with exponential learning-rate decay, re-mining and model selection."""
from dataclasses import dataclass, field, asdict
import json
from pathlib import Path
import struct
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import ConvLayer, TinyFCN, backward, forward, resize_max_side
from .loss import LossConfig, contrastive_grad, contrastive_loss, triplet_grad, triplet_loss
from .mining import MiningConfig, TrainingTuple, TupleMiner, VisibilityGraph
from .numerics import ZERO_NORM, l2_normalize
from .pooling import PoolingConfig, extract_descriptor, gem_backward_p, pool, pool_backward_x

CHECKPOINT_MAGIC = b"GEMM"
CHECKPOINT_VERSION = 1
TRAIN_FRACTION = 551 / 713
DEFAULT_LR = {"sgd": 1e-3, "adam": 1e-6}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_tuples: int = 5
    epochs: int = 30
    remine_per_epoch: int = 3
    loss: str = "contrastive"
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    query_budget: Optional[int] = None
    val_query_budget: Optional[int] = None
    max_side: int = 362
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in DEFAULT_LR:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("contrastive", "triplet"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.optimizer]
        if self.lr < 0 or self.batch_tuples < 1 or self.epochs < 0 or self.remine_per_epoch < 0:
            raise ValueError("lr, batch size, epochs and remine count must be non-negative")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch index must be >= 0")
    return cfg.lr * np.exp(-0.1 * epoch)


def tuple_to_pairs(t: TrainingTuple):
    return [(t.query, t.positive, 1)] + [(t.query, n, 0) for n in t.negatives]


def normalize_backward(f, grad_fbar):
    """Vector-Jacobian product of ``x -> x / ||x||`` at ``f``."""
    f = np.asarray(f, dtype=np.float64)
    n = np.linalg.norm(f)
    if n < ZERO_NORM:
        raise ValueError("cannot backpropagate through normalization of a zero vector")
    fbar = f / n
    g = np.asarray(grad_fbar, dtype=np.float64)
    return (g - (fbar @ g) * fbar) / n


# ---------------------------------------------------------------- gradients

def _prep(img, max_side):
    return resize_max_side(img, max_side) if max_side else np.asarray(img, dtype=np.float64)


def tuple_loss_grad(net: TinyFCN, pcfg: PoolingConfig, t: TrainingTuple, images,
                    cfg: TrainConfig, grads=None):
    """Loss of one tuple; accumulates parameter gradients into ``grads``.

    Every image of the tuple goes through the network once and its descriptor
    is shared by all pairs it appears in.
    """
    ids = [t.query, t.positive] + list(t.negatives)
    state = {}
    for i in dict.fromkeys(ids):
        x, cache = forward(net, _prep(images[i], cfg.max_side))
        f = pool(x, pcfg)
        state[i] = (x, cache, f, l2_normalize(f))
    gbar = {i: np.zeros_like(state[i][3]) for i in state}
    total = 0.0
    fq = state[t.query][3]
    if cfg.loss == "contrastive":
        for i, j, y in tuple_to_pairs(t):
            total += contrastive_loss(state[i][3], state[j][3], y, cfg.loss_cfg)
            gi, gj = contrastive_grad(state[i][3], state[j][3], y, cfg.loss_cfg)
            gbar[i] += gi
            gbar[j] += gj
    else:
        fp = state[t.positive][3]
        for n in t.negatives:
            total += triplet_loss(fq, fp, state[n][3], cfg.loss_cfg)
            gq, gp, gn = triplet_grad(fq, fp, state[n][3], cfg.loss_cfg)
            gbar[t.query] += gq
            gbar[t.positive] += gp
            gbar[n] += gn
    if grads is None:
        return total
    learn_p = pcfg.mode == "gem" and pcfg.trainable
    for i, (x, cache, f, _) in state.items():
        if not np.any(gbar[i]):
            continue
        gf = normalize_backward(f, gbar[i])
        gx = pool_backward_x(x, pcfg, f, gf)
        if learn_p:
            grads["p"] += gem_backward_p(x, pcfg, f, gf)
        bg = backward(net, cache, gx)
        for k in range(len(net.layers)):
            grads["w"][k] += bg.weights[k]
            grads["b"][k] += bg.biases[k]
    return total


def zero_grads(net, pcfg):
    return {"w": [np.zeros_like(l.weight) for l in net.layers],
            "b": [np.zeros_like(l.bias) for l in net.layers],
            "p": np.zeros_like(pcfg.exponents)}


def batch_loss_grad(net, pcfg, batch: Sequence[TrainingTuple], images, cfg: TrainConfig):
    """Mean tuple loss over the batch and its gradient (no weight decay)."""
    grads = zero_grads(net, pcfg)
    total = 0.0
    for t in batch:
        total += tuple_loss_grad(net, pcfg, t, images, cfg, grads)
    n = max(len(batch), 1)
    for key in ("w", "b"):
        grads[key] = [g / n for g in grads[key]]
    grads["p"] = grads["p"] / n
    return total / n, grads


# ---------------------------------------------------------------- optimizers

def _param_list(net, pcfg):
    params = [l.weight for l in net.layers] + [l.bias for l in net.layers]
    if pcfg.mode == "gem" and pcfg.trainable:
        params.append(pcfg.exponents)
    return params


@dataclass
class OptimizerState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def train_step(net: TinyFCN, pcfg: PoolingConfig, batch, images, cfg: TrainConfig,
               state: OptimizerState, lr: Optional[float] = None) -> float:
    """One optimizer update on ``batch``, in place; returns the batch loss."""
    lr = cfg.lr if lr is None else lr
    loss, grads = batch_loss_grad(net, pcfg, batch, images, cfg)
    gw = [g + cfg.weight_decay * l.weight for g, l in zip(grads["w"], net.layers)]
    glist = gw + grads["b"]
    params = _param_list(net, pcfg)
    if len(params) > len(glist):
        glist.append(grads["p"])
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    if cfg.optimizer == "sgd":
        for p, g, buf in zip(params, glist, state.m):
            buf *= cfg.momentum
            buf += g
            p -= lr * buf
    else:
        b1, b2 = ADAM_BETAS
        c1 = 1 - b1 ** state.step
        c2 = 1 - b2 ** state.step
        for p, g, m, v in zip(params, glist, state.m, state.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    if pcfg.mode == "gem":
        np.maximum(pcfg.exponents, 1.0, out=pcfg.exponents)
    return loss


# ---------------------------------------------------------------- validation

def descriptors_for(net, pcfg, images, ids, max_side=None) -> Dict[int, np.ndarray]:
    return {i: extract_descriptor(net, pcfg, images[i], max_side) for i in ids}


def validate(net, pcfg, tuples: Sequence[TrainingTuple], images, max_side=None,
             descriptors=None) -> float:
    """Mean reciprocal rank of the positive among positive + negatives."""
    if not tuples:
        raise ValueError("validation needs at least one tuple")
    if descriptors is None:
        ids = {i for t in tuples for i in [t.query, t.positive, *t.negatives]}
        descriptors = descriptors_for(net, pcfg, images, sorted(ids), max_side)
    scores = []
    for t in tuples:
        cands = np.array([t.positive] + list(t.negatives))
        sims = np.array([descriptors[t.query] @ descriptors[i] for i in cands])
        order = cands[np.lexsort((cands, -sims))]
        rank = int(np.flatnonzero(order == t.positive)[0]) + 1
        scores.append(1.0 / rank)
    return float(np.mean(scores))


# ---------------------------------------------------------------- fit

@dataclass
class TrainReport:
    train_clusters: List[int]
    val_clusters: List[int]
    train_loss: List[float] = field(default_factory=list)
    val_score: List[float] = field(default_factory=list)   # [initial, epoch 1, ...]
    p: List[List[float]] = field(default_factory=list)
    remine_points: List[List[int]] = field(default_factory=list)
    skipped_queries: List[int] = field(default_factory=list)
    selected_epoch: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1) + "\n"


def split_clusters(clusters, seed: int):
    clusters = sorted(clusters)
    if len(clusters) < 2:
        raise ValueError("need at least two clusters to split train/validation")
    perm = np.random.default_rng([seed, 11]).permutation(len(clusters))
    n_train = min(max(1, int(round(len(clusters) * TRAIN_FRACTION))), len(clusters) - 1)
    train = sorted(clusters[j] for j in perm[:n_train])
    val = sorted(clusters[j] for j in perm[n_train:])
    return train, val


def _snapshot(net, pcfg):
    return net.copy(), pcfg.copy()


def fit(net: TinyFCN, pcfg: PoolingConfig, graph: VisibilityGraph, images,
        cfg: TrainConfig, train_clusters=None, val_clusters=None) -> TrainReport:
    """Fine-tune ``net``/``pcfg`` in place and keep the best-validating epoch."""
    if train_clusters is None or val_clusters is None:
        train_clusters, val_clusters = split_clusters(graph.clusters, cfg.seed)
    if not train_clusters:
        raise ValueError("empty training set")
    train_graph = graph.subgraph(train_clusters)
    val_graph = graph.subgraph(list(train_clusters) + list(val_clusters))
    ms = cfg.max_side
    all_ids = sorted(val_graph.images)
    initial = descriptors_for(net, pcfg, images, all_ids, ms)

    miner = TupleMiner(train_graph, cfg.mining, initial, query_budget=cfg.query_budget)
    val_miner = TupleMiner(val_graph, cfg.mining, initial, query_clusters=val_clusters,
                           query_budget=cfg.val_query_budget)
    val_tuples, _ = val_miner.mine(val_miner.sample_queries(0), initial, 0)
    report = TrainReport(list(map(int, train_clusters)), list(map(int, val_clusters)))
    report.val_score.append(validate(net, pcfg, val_tuples, images, ms) if val_tuples else 0.0)
    report.p.append(pcfg.exponents.tolist())
    best = (report.val_score[0], _snapshot(net, pcfg))
    state = OptimizerState()
    train_ids = sorted(train_graph.images)

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        queries = miner.sample_queries(epoch)
        order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(queries))
        queries = [queries[j] for j in order]
        batches = [queries[s:s + cfg.batch_tuples]
                   for s in range(0, len(queries), cfg.batch_tuples)]
        remine_at = {(j * len(batches)) // max(cfg.remine_per_epoch, 1)
                     for j in range(max(cfg.remine_per_epoch, 1))}
        tuples_by_query = {}
        losses = []
        for b, batch_queries in enumerate(batches):
            if b in remine_at:
                descs = descriptors_for(net, pcfg, images, train_ids, ms)
                tuples, rep = miner.mine(queries, descs, epoch)
                tuples_by_query = {t.query: t for t in tuples}
                report.remine_points.append([epoch, b])
                if b == 0:
                    report.skipped_queries.extend(int(q) for q in rep.skipped)
            batch = [tuples_by_query[q] for q in batch_queries if q in tuples_by_query]
            if batch:
                losses.append(train_step(net, pcfg, batch, images, cfg, state, lr))
        report.train_loss.append(float(np.mean(losses)) if losses else 0.0)
        score = validate(net, pcfg, val_tuples, images, ms) if val_tuples else 0.0
        report.val_score.append(score)
        report.p.append(pcfg.exponents.tolist())
        if score > best[0]:
            best = (score, _snapshot(net, pcfg))

    report.selected_epoch = int(np.argmax(report.val_score))
    best_net, best_pcfg = best[1]
    for layer, src in zip(net.layers, best_net.layers):
        layer.weight[...] = src.weight
        layer.bias[...] = src.bias
    pcfg.exponents[...] = best_pcfg.exponents
    return report


# ---------------------------------------------------------------- checkpoints

_MODES = ("max", "average", "gem")
_SHARING = ("shared", "per_map")


def save_checkpoint(path, net: TinyFCN, pcfg: PoolingConfig) -> None:
    out = bytearray(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(net.layers)))
    for layer in net.layers:
        cout, cin, kh, kw = layer.weight.shape
        out += struct.pack("<5I", cout, cin, kh, kw, layer.stride)
        out += np.ascontiguousarray(layer.weight, dtype="<f4").tobytes()
        out += np.asarray(layer.bias, dtype="<f4").tobytes()
    out += struct.pack("<4I", _MODES.index(pcfg.mode), _SHARING.index(pcfg.exponent_sharing),
                       int(pcfg.trainable), pcfg.exponents.size)
    out += np.asarray(pcfg.exponents, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: missing GEMM header")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack(fmt, data[pos:pos + size])
        pos += size
        return vals

    def floats(n):
        nonlocal pos
        if pos + 4 * n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data[pos:pos + 4 * n], dtype="<f4").astype(np.float64)
        pos += 4 * n
        return arr

    version, n_layers = take("<II")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        cout, cin, kh, kw, stride = take("<5I")
        w = floats(cout * cin * kh * kw).reshape(cout, cin, kh, kw)
        layers.append(ConvLayer(w, floats(cout), stride))
    mode, sharing, trainable, n_exp = take("<4I")
    exps = floats(n_exp)
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    pcfg = PoolingConfig(_MODES[mode], _SHARING[sharing],
                         exps if n_exp else np.array([3.0]), bool(trainable))
    return TinyFCN(layers), pcfg
