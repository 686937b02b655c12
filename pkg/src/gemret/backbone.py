"""Fully convolutional feature extractor terminated by ReLU.

Images are ``(H, W, C)`` float arrays with values in ``[0, 1]``.  The network
output is an ``(H', W', K)`` non-negative activation tensor.
"""
from dataclasses import dataclass, field
from pathlib import Path
import struct
from typing import List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TENSOR_MAGIC = b"GEMT"


class TensorFileError(ValueError):
    pass


class MalformedHeader(TensorFileError):
    pass


class PayloadSizeMismatch(TensorFileError):
    pass


class NegativeActivation(TensorFileError):
    pass


# ---------------------------------------------------------------- resizing

def resize(img, new_h: int, new_w: int):
    """Bilinear resample (pixel-center aligned, edge clamped)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (new_h, new_w) == (h, w):
        return img.copy()

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis_weights(h, new_h)
    x0, x1, wx = axis_weights(w, new_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_max_side(img, max_side: int):
    """Downscale so the longer side equals ``max_side``; smaller images pass."""
    if max_side < 1:
        raise ValueError("max_side must be >= 1")
    h, w = img.shape[:2]
    longest = max(h, w)
    if longest <= max_side:
        return np.asarray(img, dtype=np.float64)
    scale = max_side / longest
    new_h = max_side if h == longest else max(1, int(round(h * scale)))
    new_w = max_side if w == longest else max(1, int(round(w * scale)))
    return resize(img, new_h, new_w)


def rescale(img, factor: float):
    h, w = img.shape[:2]
    return resize(img, max(1, int(round(h * factor))), max(1, int(round(w * factor))))


# ---------------------------------------------------------------- network

@dataclass
class ConvLayer:
    weight: np.ndarray  # (out_maps, in_maps, kh, kw)
    bias: np.ndarray    # (out_maps,)
    stride: int = 1

    @property
    def in_maps(self):
        return self.weight.shape[1]

    @property
    def out_maps(self):
        return self.weight.shape[0]

    @property
    def kernel(self):
        return self.weight.shape[2:]


@dataclass
class TinyFCN:
    """Stack of valid-padding convolutions, each followed by ReLU."""

    layers: List[ConvLayer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_maps != nxt.in_maps:
                raise ValueError("layer shapes do not chain")

    @classmethod
    def init(cls, in_channels: int = 3, maps: Sequence[int] = (8, 16, 32),
             kernel: int = 3, stride: int = 1, seed: int = 0) -> "TinyFCN":
        rng = np.random.default_rng(seed)
        layers = []
        cin = in_channels
        for cout in maps:
            fan_in = cin * kernel * kernel
            fan_out = cout * kernel * kernel
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel))
            layers.append(ConvLayer(w, np.zeros(cout), stride))
            cin = cout
        return cls(layers)

    @property
    def out_maps(self) -> int:
        return self.layers[-1].out_maps

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_maps

    def output_shape(self, h: int, w: int):
        for layer in self.layers:
            kh, kw = layer.kernel
            h = (h - kh) // layer.stride + 1
            w = (w - kw) // layer.stride + 1
        return h, w

    def parameters(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self) -> "TinyFCN":
        return TinyFCN([ConvLayer(l.weight.copy(), l.bias.copy(), l.stride)
                        for l in self.layers])


@dataclass
class ForwardCache:
    inputs: list       # input to each layer
    preacts: list      # pre-ReLU output of each layer


@dataclass
class BackboneGradients:
    weights: list
    biases: list


def _patches(x, layer):
    kh, kw = layer.kernel
    s = layer.stride
    return sliding_window_view(x, (kh, kw), axis=(0, 1))[::s, ::s]


def forward(net: TinyFCN, img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] != net.in_channels:
        raise ValueError(f"image has {img.shape[2]} channels, network expects "
                         f"{net.in_channels}")
    oh, ow = net.output_shape(*img.shape[:2])
    if oh < 1 or ow < 1:
        raise ValueError(f"image {img.shape[1]}x{img.shape[0]} is smaller than "
                         "the network receptive field")
    inputs, preacts = [], []
    x = img
    for layer in net.layers:
        inputs.append(x)
        z = np.tensordot(_patches(x, layer), layer.weight,
                         axes=([2, 3, 4], [1, 2, 3])) + layer.bias
        preacts.append(z)
        x = np.maximum(z, 0.0)
    return x, ForwardCache(inputs, preacts)


def backward(net: TinyFCN, cache: ForwardCache, grad_out) -> BackboneGradients:
    grad = np.asarray(grad_out, dtype=np.float64)
    if grad.shape != cache.preacts[-1].shape:
        raise ValueError(f"grad_out shape {grad.shape} does not match forward "
                         f"output {cache.preacts[-1].shape}")
    n = len(net.layers)
    gw, gb = [None] * n, [None] * n
    for i in reversed(range(n)):
        layer = net.layers[i]
        g = grad * (cache.preacts[i] > 0)
        x = cache.inputs[i]
        gw[i] = np.tensordot(g, _patches(x, layer), axes=([0, 1], [0, 1]))
        gb[i] = g.sum(axis=(0, 1))
        if i == 0:
            break
        kh, kw = layer.kernel
        s = layer.stride
        if s == 1:
            # full correlation with the flipped kernel
            gp = np.pad(g, ((kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            cols = sliding_window_view(gp, (kh, kw), axis=(0, 1))
            grad = np.tensordot(cols, layer.weight[:, :, ::-1, ::-1],
                                axes=([2, 3, 4], [0, 2, 3]))
            continue
        gx = np.zeros_like(x)
        ho, wo = g.shape[:2]
        for a in range(kh):
            for b in range(kw):
                gx[a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += \
                    g @ layer.weight[:, :, a, b]
        grad = gx
    return BackboneGradients(gw, gb)


# ---------------------------------------------------------------- tensor files

def save_tensor(path, x) -> None:
    x = np.asarray(x)
    h, w, k = x.shape
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<III", w, h, k))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def load_precomputed(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != TENSOR_MAGIC:
        raise MalformedHeader(f"{path}: missing GEMT header")
    w, h, k = struct.unpack("<III", data[4:16])
    if min(w, h, k) == 0:
        raise MalformedHeader(f"{path}: zero dimension in header ({w}x{h}x{k})")
    payload = data[16:]
    expected = w * h * k * 4
    if len(payload) != expected:
        raise PayloadSizeMismatch(
            f"{path}: header advertises {w}x{h}x{k} values ({expected} bytes), "
            f"payload has {len(payload)} bytes")
    x = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, k)
    if np.any(x < 0):
        raise NegativeActivation(f"{path}: tensor contains negative activations")
    return x
