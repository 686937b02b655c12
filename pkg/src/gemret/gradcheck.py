"""Finite-difference verification of every analytic gradient in the pipeline.

Each suite draws seeded random instances, compares the analytic gradient
with central differences and reports the worst componentwise relative error
``|a - n| / max(1e-6, |a| + |n|)``.
"""
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .backbone import TinyFCN, backward, forward
from .loss import LossConfig, contrastive_grad, contrastive_loss
from .mining import TrainingTuple
from .numerics import finite_diff_grad, l2_normalize, relative_error
from .pooling import PoolingConfig, gem_backward_p, gem_backward_x, gem_pool
from .trainer import TrainConfig, batch_loss_grad, normalize_backward, tuple_loss_grad

STEP = 1e-5
COMPONENT_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _identity(g):
    return g


def power_mean_ld(x, p):
    """Direct power mean per map in extended precision (oracle side only)."""
    xs = np.maximum(np.asarray(x, dtype=np.longdouble).reshape(-1, np.shape(x)[-1]), 1e-6)
    p = np.asarray(p, dtype=np.longdouble)
    return np.mean(xs ** p, axis=0) ** (1 / p)


def pooling_x_suite(rng, n, corrupt=_identity):
    worst = 0.0
    for _ in range(n):
        h, w, k = rng.integers(2, 5, size=3)
        x = rng.uniform(0.0, 5.0, size=(h, w, k))
        cfg = PoolingConfig.gem(per_map=int(k)) if rng.random() < 0.5 else PoolingConfig.gem()
        cfg.exponents[:] = rng.uniform(1.0, 10.0, cfg.exponents.size)
        gf = rng.normal(size=k)
        f = gem_pool(x, cfg)
        ana = corrupt(gem_backward_x(x, cfg, f, gf))
        p = cfg.per_map_exponents(int(k))
        num = finite_diff_grad(lambda xx: gf @ power_mean_ld(xx, p), x, STEP)
        worst = max(worst, relative_error(ana, num).max())
    return worst


def pooling_p_suite(rng, n, corrupt=_identity):
    worst = 0.0
    for _ in range(n):
        h, w, k = rng.integers(2, 5, size=3)
        x = rng.uniform(0.0, 5.0, size=(h, w, k))
        cfg = PoolingConfig.gem(per_map=int(k)) if rng.random() < 0.5 else PoolingConfig.gem()
        p0 = rng.uniform(1.0, 10.0, cfg.exponents.size)
        cfg.exponents[:] = p0
        gf = rng.normal(size=k)
        ana = corrupt(gem_backward_p(x, cfg, gem_pool(x, cfg), gf))

        if cfg.exponent_sharing == "shared":
            num = finite_diff_grad(lambda p: gf @ power_mean_ld(x, np.full(k, p[0])), p0, STEP)
        else:
            num = finite_diff_grad(lambda p: gf @ power_mean_ld(x, p), p0, STEP)
        worst = max(worst, relative_error(ana, num).max())
    return worst


def contrastive_suite(rng, n, corrupt=_identity):
    worst = 0.0
    done = 0
    while done < n:
        k = int(rng.integers(2, 9))
        fi = l2_normalize(rng.normal(size=k))
        fj = l2_normalize(rng.normal(size=k))
        y = int(rng.integers(2))
        cfg = LossConfig(margin=float(rng.uniform(0.5, 1.5)))
        if abs(np.linalg.norm(fi - fj) - cfg.margin) <= 1e-3:
            continue  # hinge kink
        gi, gj = contrastive_grad(fi, fj, y, cfg)
        ni = finite_diff_grad(lambda v: contrastive_loss(v, fj, y, cfg), fi, STEP)
        nj = finite_diff_grad(lambda v: contrastive_loss(fi, v, y, cfg), fj, STEP)
        worst = max(worst, relative_error(corrupt(gi), ni).max(), relative_error(gj, nj).max())
        done += 1
    return worst


def normalize_suite(rng, n, corrupt=_identity):
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(2, 9))
        f = rng.normal(size=k) * rng.uniform(0.1, 5.0)
        g = rng.normal(size=k)
        ana = corrupt(normalize_backward(f, g))
        num = finite_diff_grad(lambda v: float(g @ l2_normalize(v)), f, STEP)
        worst = max(worst, relative_error(ana, num).max())
    return worst


def _flatten(net, pcfg):
    parts = [l.weight.ravel() for l in net.layers] + [l.bias for l in net.layers]
    return np.concatenate(parts + [pcfg.exponents])


def _assign(net, pcfg, theta):
    pos = 0
    for arr in [l.weight for l in net.layers] + [l.bias for l in net.layers] + [pcfg.exponents]:
        arr[...] = theta[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size


def end_to_end_suite(rng, n, corrupt=_identity, layers=1):
    """conv -> ReLU -> GeM -> l2 -> contrastive over one tuple with 2 negatives."""
    worst = 0.0
    maps = (4, 5, 6)[:layers]
    for _ in range(n):
        net = TinyFCN.init(2, maps, seed=int(rng.integers(2 ** 31)))
        for l in net.layers:
            l.bias[:] = rng.uniform(0.0, 0.1, l.bias.shape)
        pcfg = PoolingConfig.gem(float(rng.uniform(1.5, 6.0)))
        size = 4 + 2 * layers
        images = {i: rng.uniform(0, 1, size=(size, size, 2)) for i in range(4)}
        t = TrainingTuple(0, 1, [2, 3])
        cfg = TrainConfig(loss_cfg=LossConfig(margin=1.4), max_side=0)
        _, grads = batch_loss_grad(net, pcfg, [t], images, cfg)
        ana = np.concatenate([g.ravel() for g in grads["w"]] + list(grads["b"]) + [grads["p"]])
        ana = corrupt(ana)
        theta0 = _flatten(net, pcfg)

        def fn(theta):
            _assign(net, pcfg, theta)
            return tuple_loss_grad(net, pcfg, t, images, cfg)

        num = finite_diff_grad(fn, theta0, STEP)
        _assign(net, pcfg, theta0)
        worst = max(worst, relative_error(ana, num).max())
    return worst


SUITES: Dict[str, Callable] = {
    "pooling_x": pooling_x_suite,
    "pooling_p": pooling_p_suite,
    "contrastive": contrastive_suite,
    "normalize": normalize_suite,
    "end_to_end": end_to_end_suite,
}


def run_all(seed: int = 0, instances: int = 100, corrupt: Optional[str] = None):
    """Run every suite; ``corrupt`` names a suite whose analytic gradient is
    deliberately scaled by 1.01 (negative control)."""
    results = []
    for idx, (name, suite) in enumerate(SUITES.items()):
        rng = np.random.default_rng([seed, idx])
        bad = (lambda g: np.asarray(g) * 1.01) if name == corrupt else _identity
        err = suite(rng, instances, bad)
        tol = END_TO_END_TOL if name == "end_to_end" else COMPONENT_TOL
        results.append(SuiteResult(name, instances, float(err), tol))
    return results
