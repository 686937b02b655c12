"""Global pooling of activation tensors: MAC, SPoC and trainable GeM."""
from dataclasses import dataclass, field

import numpy as np

from .backbone import forward, resize_max_side
from .numerics import l2_normalize

EPS = 1e-6
MODES = ("max", "average", "gem")


@dataclass
class PoolingConfig:
    mode: str = "gem"
    exponent_sharing: str = "shared"
    exponents: np.ndarray = field(default_factory=lambda: np.array([3.0]))
    trainable: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown pooling mode {self.mode!r}")
        if self.exponent_sharing not in ("shared", "per_map"):
            raise ValueError(f"unknown exponent sharing {self.exponent_sharing!r}")
        if self.mode != "gem":
            self.exponents = np.zeros(0)
            self.trainable = False
            return
        self.exponents = np.atleast_1d(np.asarray(self.exponents, dtype=np.float64)).copy()
        if self.exponent_sharing == "shared" and self.exponents.size != 1:
            raise ValueError("shared exponent config needs exactly one exponent")
        if np.any(self.exponents < 1.0):
            raise ValueError(f"GeM exponents must be >= 1, got {self.exponents}")

    @classmethod
    def gem(cls, p: float = 3.0, per_map: int = 0, trainable: bool = True):
        """Shared exponent ``p``, or ``per_map`` copies of it when non-zero."""
        if per_map:
            return cls("gem", "per_map", np.full(per_map, float(p)), trainable)
        return cls("gem", "shared", np.array([float(p)]), trainable)

    @property
    def shared_p(self) -> float:
        if self.mode != "gem":
            return 1.0
        return float(self.exponents[0]) if self.exponent_sharing == "shared" \
            else float(np.mean(self.exponents))

    def per_map_exponents(self, k: int) -> np.ndarray:
        if self.exponent_sharing == "shared":
            return np.full(k, self.exponents[0])
        if self.exponents.size != k:
            raise ValueError(f"config has {self.exponents.size} exponents for {k} maps")
        return self.exponents

    def copy(self) -> "PoolingConfig":
        return PoolingConfig(self.mode, self.exponent_sharing,
                             self.exponents.copy(), self.trainable)


def _maps(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    return x.reshape(-1, x.shape[-1])  # (N, K)


def mac_pool(x):
    return _maps(x).max(axis=0)


def spoc_pool(x):
    return _maps(x).mean(axis=0)


def _check_gem(cfg):
    if cfg.mode != "gem":
        raise ValueError("config is not in gem mode")
    if np.any(cfg.exponents < 1.0):
        raise ValueError(f"GeM exponents must be >= 1, got {cfg.exponents}")


def gem_pool(x, cfg: PoolingConfig):
    """Power mean per feature map, evaluated as ``m * mean((x/m)^p)^(1/p)``."""
    _check_gem(cfg)
    xs = np.maximum(_maps(x), EPS)
    p = cfg.per_map_exponents(xs.shape[1])
    m = xs.max(axis=0)
    return m * np.mean((xs / m) ** p, axis=0) ** (1.0 / p)


def pool(x, cfg: PoolingConfig):
    if cfg.mode == "max":
        return mac_pool(x)
    if cfg.mode == "average":
        return spoc_pool(x)
    return gem_pool(x, cfg)


def _check_shapes(x, f, grad_f):
    k = _maps(x).shape[1]
    if np.shape(f) != (k,) or np.shape(grad_f) != (k,):
        raise ValueError(f"pooled vector / gradient must have shape ({k},)")


def gem_backward_x(x, cfg: PoolingConfig, f, grad_f):
    """Gradient w.r.t. the activations: ``grad_f_k / N * (x_i / f_k)^(p_k - 1)``."""
    _check_gem(cfg)
    _check_shapes(x, f, grad_f)
    shape = np.shape(x)
    xs = np.maximum(_maps(x), EPS)
    p = cfg.per_map_exponents(xs.shape[1])
    g = np.asarray(grad_f) / xs.shape[0] * (xs / np.asarray(f)) ** (p - 1.0)
    return g.reshape(shape)


def gem_backward_p(x, cfg: PoolingConfig, f, grad_f):
    """Gradient w.r.t. the exponent(s); length 1 when shared, K otherwise.

    Uses ``y = x / max(x)`` so that
    ``df/dp = f/p^2 * (log N - log sum y^p + p * sum(y^p log y) / sum y^p)``,
    which is the textbook expression with the max factored out.
    """
    _check_gem(cfg)
    _check_shapes(x, f, grad_f)
    xs = np.maximum(_maps(x), EPS)
    n = xs.shape[0]
    p = cfg.per_map_exponents(xs.shape[1])
    y = xs / xs.max(axis=0)
    yp = y ** p
    s = yp.sum(axis=0)
    dfdp = np.asarray(f) / p ** 2 * (np.log(n) - np.log(s) + p * (yp * np.log(y)).sum(axis=0) / s)
    g = np.asarray(grad_f) * dfdp
    if cfg.exponent_sharing == "shared":
        return np.array([g.sum()])
    return g


def pool_backward_x(x, cfg: PoolingConfig, f, grad_f):
    """Activation gradient for any pooling mode (max routes to the first argmax)."""
    if cfg.mode == "gem":
        return gem_backward_x(x, cfg, f, grad_f)
    _check_shapes(x, f, grad_f)
    xm = _maps(x)
    g = np.zeros_like(xm)
    if cfg.mode == "average":
        g[:] = np.asarray(grad_f) / xm.shape[0]
    else:
        g[np.argmax(xm, axis=0), np.arange(xm.shape[1])] = grad_f
    return g.reshape(np.shape(x))


def extract_descriptor(net, cfg: PoolingConfig, img, max_side=None):
    if max_side:
        img = resize_max_side(img, max_side)
    x, _ = forward(net, img)
    return l2_normalize(pool(x, cfg))
