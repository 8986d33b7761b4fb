"""Neural layers with closed-form parameter accounting.

Tensors are channels-last with a leading batch axis: images are
``(B, H, W, C)``, sequences ``(B, T, D)``.  Convolutions use stride 1 and
same-padding; when a kernel extent is even the extra zero goes on the
trailing side.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import DTYPE, Node, ShapeError

KINDS = ("Input", "SeparableConv2D", "Conv2D", "Conv1D", "BatchNorm", "Dense",
         "TimeDistributedDense", "LSTM", "Reshape", "TimeDistributedFlatten", "Concat")

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, ...] = ()
    activation: str = "linear"
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("SeparableConv2D", "Conv2D", "Conv1D"):
            if not self.kernel or min(self.kernel) < 1:
                raise ValueError(f"{self.kind}: kernel extents must be >= 1, got {self.kernel}")
        if self.kind in ("SeparableConv2D", "Conv2D", "Conv1D", "Dense", "TimeDistributedDense", "LSTM"):
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"{self.kind}: channels must be >= 1")
        if self.kind == "BatchNorm" and self.in_channels < 1:
            raise ValueError("BatchNorm: channels must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")

    @property
    def units(self) -> int:
        return self.out_channels


def param_count(spec: LayerSpec) -> int:
    """Trainable plus non-trainable parameter count of one layer."""
    k = int(np.prod(spec.kernel)) if spec.kernel else 0
    cin, cout = spec.in_channels, spec.out_channels
    if spec.kind == "SeparableConv2D":
        return k * cin + cin * cout + cout
    if spec.kind in ("Conv2D", "Conv1D"):
        return k * cin * cout + cout
    if spec.kind == "BatchNorm":
        return 4 * cin
    if spec.kind in ("Dense", "TimeDistributedDense"):
        return cin * cout + cout
    if spec.kind == "LSTM":
        return 4 * ((cin + cout) * cout + cout)
    return 0


# ---------------------------------------------------------------- fused ops

def same_pad(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def _pad_hw(x: np.ndarray, kh: int, kw: int, flip: bool = False) -> np.ndarray:
    pt, pb = same_pad(kh)
    pl, pr = same_pad(kw)
    if flip:
        pt, pb, pl, pr = pb, pt, pr, pl
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _windows(x: np.ndarray, kh: int, kw: int, flip: bool = False) -> np.ndarray:
    """Read-only ``(B, H, W, C, kh, kw)`` view of same-padded patches.

    With ``flip`` the padding is mirrored, which turns correlation with a
    flipped kernel into the input gradient of the forward correlation.
    """
    return sliding_window_view(_pad_hw(x, kh, kw, flip), (kh, kw), axis=(1, 2))


def depthwise_conv2d(x: Node, kernel: Node) -> Node:
    """Per-channel spatial filtering; ``kernel`` is ``(kh, kw, C)``."""
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.ndim != 3 or xv.shape[-1] != kv.shape[-1]:
        raise ShapeError(f"depthwise_conv2d: incompatible shapes {xv.shape} and {kv.shape}")
    kh, kw, _ = kv.shape
    win = _windows(xv, kh, kw)
    out = np.einsum("bhwcij,ijc->bhwc", win, kv, optimize=True)

    def back(g):
        gk = np.einsum("bhwcij,bhwc->ijc", win, g, optimize=True)
        gx = np.einsum("bhwcij,ijc->bhwc", _windows(g, kh, kw, flip=True), kv[::-1, ::-1], optimize=True)
        return gx, gk

    return Node.from_op(out, (x, kernel), back, "depthwise_conv2d")


def conv2d(x: Node, kernel: Node) -> Node:
    """Dense convolution; ``kernel`` is ``(kh, kw, Cin, Cout)``."""
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.ndim != 4 or xv.shape[-1] != kv.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {xv.shape} and {kv.shape}")
    kh, kw = kv.shape[:2]
    win = _windows(xv, kh, kw)
    out = np.einsum("bhwcij,ijco->bhwo", win, kv, optimize=True)

    def back(g):
        gk = np.einsum("bhwcij,bhwo->ijco", win, g, optimize=True)
        gx = np.einsum("bhwoij,ijco->bhwc", _windows(g, kh, kw, flip=True), kv[::-1, ::-1], optimize=True)
        return gx, gk

    return Node.from_op(out, (x, kernel), back, "conv2d")


def batch_norm_train(x: Node, gamma: Node, beta: Node, eps: float = BN_EPSILON):
    """Normalize with batch statistics over every axis but the last.

    Returns the output node plus the batch mean and (biased) variance.
    """
    xv = x.value
    axes = tuple(range(xv.ndim - 1))
    n = xv.size // xv.shape[-1]
    mu = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value
    out = xhat * gv + beta.value

    def back(g):
        dxhat = g * gv
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Node.from_op(out, (x, gamma, beta), back, "batch_norm"), mu, var


def batch_norm_infer(x: Node, gamma: Node, beta: Node, mean: np.ndarray, var: np.ndarray,
                     eps: float = BN_EPSILON) -> Node:
    xv = x.value
    axes = tuple(range(xv.ndim - 1))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    gv = gamma.value
    return Node.from_op(xhat * gv + beta.value, (x, gamma, beta),
                        lambda g: (g * gv * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)),
                        "batch_norm_infer")


def lstm_sequence(x: Node, w: Node, u: Node, b: Node) -> Node:
    """Run an LSTM from a zero state over ``x`` of shape ``(B, T, D)``.

    Gate blocks in ``w`` (D, 4U), ``u`` (U, 4U) and ``b`` (4U,) are ordered
    input, forget, output, candidate.  Returns every hidden state, ``(B, T, U)``.
    """
    xv, wv, uv, bv = x.value, w.value, u.value, b.value
    if xv.ndim != 3 or xv.shape[1] == 0:
        raise ShapeError(f"lstm_sequence: expected a non-empty (B, T, D) input, got {xv.shape}")
    B, Tn, D = xv.shape
    U = uv.shape[0]
    if wv.shape != (D, 4 * U) or uv.shape != (U, 4 * U) or bv.shape != (4 * U,):
        raise ShapeError(f"lstm_sequence: weights {wv.shape}, {uv.shape}, {bv.shape} do not fit input {xv.shape}")
    xw = xv @ wv + bv
    hs = np.zeros((B, Tn + 1, U), dtype=DTYPE)
    cs = np.zeros((B, Tn + 1, U), dtype=DTYPE)
    gates = np.empty((B, Tn, 4 * U), dtype=DTYPE)
    for t in range(Tn):
        z = xw[:, t] + hs[:, t] @ uv
        a = gates[:, t]
        a[:, :3 * U] = T._sigmoid(z[:, :3 * U])
        a[:, 3 * U:] = np.tanh(z[:, 3 * U:])
        i, f, o, g = a[:, :U], a[:, U:2 * U], a[:, 2 * U:3 * U], a[:, 3 * U:]
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])

    def back(gout):
        dz = np.empty_like(gates)
        dh_next = np.zeros((B, U), dtype=DTYPE)
        dc_next = np.zeros((B, U), dtype=DTYPE)
        for t in range(Tn - 1, -1, -1):
            a = gates[:, t]
            i, f, o, g = a[:, :U], a[:, U:2 * U], a[:, 2 * U:3 * U], a[:, 3 * U:]
            tc = np.tanh(cs[:, t + 1])
            dh = gout[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            d = dz[:, t]
            d[:, :U] = dc * g * i * (1.0 - i)
            d[:, U:2 * U] = dc * cs[:, t] * f * (1.0 - f)
            d[:, 2 * U:3 * U] = dh * tc * o * (1.0 - o)
            d[:, 3 * U:] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = d @ uv.T
        dz2 = dz.reshape(-1, 4 * U)
        gx = dz @ wv.T
        gw = xv.reshape(-1, D).T @ dz2
        gu = hs[:, :-1].reshape(-1, U).T @ dz2
        return gx, gw, gu, dz2.sum(axis=0)

    return Node.from_op(hs[:, 1:].copy(), (x, w, u, b), back, "lstm_sequence")


class LstmState(NamedTuple):
    h: Node
    c: Node

    @classmethod
    def zeros(cls, batch: int, units: int) -> "LstmState":
        return cls(Node(np.zeros((batch, units))), Node(np.zeros((batch, units))))


def lstm_step(x_t: Node, state: LstmState, w: Node, u: Node, b: Node) -> tuple[Node, LstmState]:
    """One LSTM step written with primitive ops (reference for :func:`lstm_sequence`)."""
    U = u.shape[0]
    if x_t.shape[-1] != w.shape[0] or state.h.shape[-1] != U or w.shape[1] != 4 * U:
        raise ShapeError(f"lstm_step: input {x_t.shape}, state {state.h.shape}, weights {w.shape}/{u.shape}")
    z = T.matmul(x_t, w) + T.matmul(state.h, u) + b
    i = T.sigmoid(T.slice_(z, -1, 0, U))
    f = T.sigmoid(T.slice_(z, -1, U, 2 * U))
    o = T.sigmoid(T.slice_(z, -1, 2 * U, 3 * U))
    g = T.tanh(T.slice_(z, -1, 3 * U, 4 * U))
    c = f * state.c + i * g
    h = o * T.tanh(c)
    return h, LstmState(h, c)


# ---------------------------------------------------------------- layers

def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """A named layer holding trainable ``params`` and non-trainable ``buffers``."""

    def __init__(self, name: str, spec: LayerSpec):
        self.name = name
        self.spec = spec
        self.params: dict[str, Node] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def __call__(self, x: Node, training: bool = False) -> Node:
        raise NotImplementedError

    def size(self) -> int:
        return sum(p.size for p in self.params.values()) + sum(b.size for b in self.buffers.values())


class SeparableConv2D(Layer):
    def __init__(self, name, spec, rng):
        super().__init__(name, spec)
        kh, kw = spec.kernel
        cin, cout = spec.in_channels, spec.out_channels
        self.params["depthwise"] = T.parameter(glorot(rng, (kh, kw, cin), kh * kw, kh * kw))
        self.params["pointwise"] = T.parameter(glorot(rng, (cin, cout), cin, cout))
        self.params["bias"] = T.parameter(np.zeros(cout))

    def __call__(self, x, training=False):
        if x.shape[-1] != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected {self.spec.in_channels} input channels, got {x.shape[-1]}")
        y = depthwise_conv2d(x, self.params["depthwise"])
        y = T.matmul(y, self.params["pointwise"]) + self.params["bias"]
        return T.activate(y, self.spec.activation)


class Conv2D(Layer):
    def __init__(self, name, spec, rng):
        super().__init__(name, spec)
        kh, kw = spec.kernel
        cin, cout = spec.in_channels, spec.out_channels
        self.params["kernel"] = T.parameter(glorot(rng, (kh, kw, cin, cout), kh * kw * cin, kh * kw * cout))
        self.params["bias"] = T.parameter(np.zeros(cout))

    def __call__(self, x, training=False):
        if x.shape[-1] != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected {self.spec.in_channels} input channels, got {x.shape[-1]}")
        y = conv2d(x, self.params["kernel"]) + self.params["bias"]
        return T.activate(y, self.spec.activation)


class Conv1D(Layer):
    def __init__(self, name, spec, rng):
        super().__init__(name, spec)
        (k,) = spec.kernel
        cin, cout = spec.in_channels, spec.out_channels
        self.params["kernel"] = T.parameter(glorot(rng, (k, cin, cout), k * cin, k * cout))
        self.params["bias"] = T.parameter(np.zeros(cout))

    def __call__(self, x, training=False):
        B, L, C = x.shape
        if C != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected {self.spec.in_channels} input channels, got {C}")
        k, cin, cout = self.params["kernel"].shape
        kern = T.reshape(self.params["kernel"], (k, 1, cin, cout))
        y = conv2d(T.reshape(x, (B, L, 1, C)), kern)
        y = T.reshape(y, (B, L, cout)) + self.params["bias"]
        return T.activate(y, self.spec.activation)


class BatchNorm(Layer):
    def __init__(self, name, spec, rng=None):
        super().__init__(name, spec)
        c = spec.in_channels
        self.params["gamma"] = T.parameter(np.ones(c))
        self.params["beta"] = T.parameter(np.zeros(c))
        self.buffers["moving_mean"] = np.zeros(c)
        self.buffers["moving_variance"] = np.ones(c)
        self.updates = 0

    def __call__(self, x, training=False):
        if x.shape[-1] != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected {self.spec.in_channels} channels, got {x.shape[-1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if training:
            out, mu, var = batch_norm_train(x, gamma, beta)
            m = BN_MOMENTUM
            self.buffers["moving_mean"] = m * self.buffers["moving_mean"] + (1 - m) * mu
            self.buffers["moving_variance"] = m * self.buffers["moving_variance"] + (1 - m) * var
            self.updates += 1
            return out
        if self.updates == 0:
            raise RuntimeError(f"{self.name}: inference before any training step (moving statistics undefined)")
        return batch_norm_infer(x, gamma, beta, self.buffers["moving_mean"], self.buffers["moving_variance"])


class Dense(Layer):
    """Dense map over the last axis; applied row-wise this is the time-distributed dense."""

    def __init__(self, name, spec, rng):
        super().__init__(name, spec)
        cin, cout = spec.in_channels, spec.out_channels
        self.params["kernel"] = T.parameter(glorot(rng, (cin, cout), cin, cout))
        self.params["bias"] = T.parameter(np.zeros(cout))

    def __call__(self, x, training=False):
        y = T.matmul(x, self.params["kernel"]) + self.params["bias"]
        return T.activate(y, self.spec.activation)


class LSTM(Layer):
    def __init__(self, name, spec, rng):
        super().__init__(name, spec)
        d, units = spec.in_channels, spec.out_channels
        self.params["kernel"] = T.parameter(glorot(rng, (d, 4 * units), d, 4 * units))
        self.params["recurrent_kernel"] = T.parameter(glorot(rng, (units, 4 * units), units, 4 * units))
        bias = np.zeros(4 * units)
        bias[units:2 * units] = FORGET_BIAS
        self.params["bias"] = T.parameter(bias)

    def __call__(self, x, training=False):
        if x.shape[-1] != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expected input dim {self.spec.in_channels}, got {x.shape[-1]}")
        p = self.params
        return lstm_sequence(x, p["kernel"], p["recurrent_kernel"], p["bias"])


class Flatten(Layer):
    """Time-distributed flatten ``(B, H, W, C) -> (B, H, W*C)``."""

    def __call__(self, x, training=False):
        B, H = x.shape[:2]
        return T.reshape(x, (B, H, int(np.prod(x.shape[2:]))))


_BUILDERS = {
    "SeparableConv2D": SeparableConv2D,
    "Conv2D": Conv2D,
    "Conv1D": Conv1D,
    "BatchNorm": BatchNorm,
    "Dense": Dense,
    "TimeDistributedDense": Dense,
    "LSTM": LSTM,
}


def build_layer(name: str, spec: LayerSpec, rng: np.random.Generator) -> Layer:
    if spec.kind == "TimeDistributedFlatten":
        return Flatten(name, spec)
    if spec.kind in _BUILDERS:
        return _BUILDERS[spec.kind](name, spec, rng)
    return Layer(name, spec)
