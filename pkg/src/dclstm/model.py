"""D-CLSTM-t assembly, ablation variants and checkpoints."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import container
from . import tensor as T
from .layers import BN_EPSILON, BN_MOMENTUM, BatchNorm, Layer, LayerSpec, build_layer, param_count
from .tensor import Node, ShapeError

VARIANTS = ("DCLSTMt", "DCLSTMt_Conv2D", "CLSTM_S_t", "CLSTM_T_t", "DCLSTM_noMarker",
            "CNN_t", "SpeedOnly", "FlowOnly")

# dataset channel order: four length-band flows, total flow, speed
SPEED_CHANNEL = 5
CHANNELS = {"SpeedOnly": (5,), "FlowOnly": (0, 1, 2, 3, 4)}
ALL_CHANNELS = (0, 1, 2, 3, 4, 5)

# CLI names and the test letters they reproduce
VARIANT_ALIASES = {
    "dclstm-t": "DCLSTMt", "a": "DCLSTMt",
    "dclstm-t-conv2d": "DCLSTMt_Conv2D", "b": "DCLSTMt_Conv2D",
    "clstm-s-t": "CLSTM_S_t", "c": "CLSTM_S_t",
    "clstm-t-t": "CLSTM_T_t", "d": "CLSTM_T_t",
    "dclstm": "DCLSTM_noMarker", "e": "DCLSTM_noMarker",
    "cnn-t": "CNN_t", "f": "CNN_t",
    "speed-only": "SpeedOnly", "j": "SpeedOnly",
    "flow-only": "FlowOnly", "k": "FlowOnly",
}


class SpecConflictError(ValueError):
    pass


def resolve_variant(name: str) -> str:
    if name in VARIANTS:
        return name
    try:
        return VARIANT_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANT_ALIASES)}") from None


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "DCLSTMt"
    sites: int = 60
    window: int = 4
    channels: int | None = None
    horizon: int = 1
    marker_dim: int = 8
    outputs: int = 1
    filters: tuple[int, int, int] = (32, 64, 128)
    space_kernels: tuple = ((2, 1), (4, 2), (8, 4))
    time_kernels: tuple = ((2, 4), (2, 8), (4, 16))
    space_units: int = 60
    time_units: int | None = None
    marker_kernel: int | None = None
    bn_before_activation: bool = False
    raw_reshape: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", resolve_variant(self.variant))
        want = len(CHANNELS.get(self.variant, ALL_CHANNELS))
        if self.channels is None:
            object.__setattr__(self, "channels", want)
        elif self.channels != want:
            raise ValueError(f"{self.variant} takes {want} input channels, got {self.channels}")
        if self.time_units is None:
            object.__setattr__(self, "time_units", self.sites)
        if self.marker_kernel is None:
            object.__setattr__(self, "marker_kernel", self.sites)
        object.__setattr__(self, "filters", tuple(self.filters))
        object.__setattr__(self, "space_kernels", tuple(tuple(k) for k in self.space_kernels))
        object.__setattr__(self, "time_kernels", tuple(tuple(k) for k in self.time_kernels))
        for name in ("sites", "window", "horizon", "marker_dim", "outputs", "space_units", "time_units"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.outputs not in (1, self.horizon):
            raise ValueError("outputs must be 1 (direct forecast) or equal to horizon")

    @property
    def input_channels(self) -> tuple[int, ...]:
        return CHANNELS.get(self.variant, ALL_CHANNELS)

    @property
    def has_space(self) -> bool:
        return self.variant != "CLSTM_T_t"

    @property
    def has_time(self) -> bool:
        return self.variant != "CLSTM_S_t"

    @property
    def has_marker(self) -> bool:
        return self.variant != "DCLSTM_noMarker"

    @property
    def has_lstm(self) -> bool:
        return self.variant != "CNN_t"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["space_kernels"] = [list(k) for k in self.space_kernels]
        d["time_kernels"] = [list(k) for k in self.time_kernels]
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class Row:
    name: str
    kind: str
    shape: tuple
    spec: LayerSpec | None = None
    kernel: tuple = ()

    @property
    def params(self) -> int:
        return param_count(self.spec) if self.spec is not None else 0


def layer_rows(spec: ModelSpec) -> list[Row]:
    """The declarative layer graph: one row per named layer, with output shapes (batch axis omitted)."""
    p, n, c = spec.sites, spec.window, spec.channels
    conv = "Conv2D" if spec.variant == "DCLSTMt_Conv2D" else "SeparableConv2D"
    act = "linear" if spec.bn_before_activation else "relu"
    rows: list[Row] = []
    widths = []
    f3 = spec.filters[-1]

    def conv_stack(prefix, h, w, kernels):
        cin = c
        for idx, (k, f) in enumerate(zip(kernels, spec.filters)):
            rows.append(Row(f"{prefix}_{2 * idx + 1}", conv, (h, w, f), LayerSpec(conv, cin, f, tuple(k), act), tuple(k)))
            rows.append(Row(f"{prefix}_{2 * idx + 2}", "BatchNorm", (h, w, f), LayerSpec("BatchNorm", f)))
            cin = f

    if spec.has_space:
        rows.append(Row("a_0", "Input", (p, n, c)))
        conv_stack("a", p, n, spec.space_kernels)
        rows.append(Row("a_7", "TimeDistributedFlatten", (p, n * f3), LayerSpec("TimeDistributedFlatten")))
        rows.append(Row("a_8", "TimeDistributedDense", (p, c), LayerSpec("TimeDistributedDense", n * f3, c)))
        if spec.has_lstm:
            u = spec.space_units
            rows.append(Row("a_9", "LSTM", (p, u), LayerSpec("LSTM", c, u, activation="tanh")))
            rows.append(Row("a_10", "LSTM", (p, c), LayerSpec("LSTM", u, c, activation="tanh")))
        widths.append(c)
    if spec.has_time:
        tu = spec.time_units
        rows.append(Row("b_0", "Input", (n, p, c)))
        conv_stack("b", n, p, spec.time_kernels)
        rows.append(Row("b_7", "TimeDistributedFlatten", (n, p * f3), LayerSpec("TimeDistributedFlatten")))
        last = p if spec.has_lstm else tu
        if not spec.has_lstm and tu != p:
            raise ShapeError(f"CNN_t needs time_units == sites ({tu} != {p}) to realign the time branch")
        rows.append(Row("b_8", "TimeDistributedDense", (n, tu), LayerSpec("TimeDistributedDense", p * f3, tu)))
        if spec.has_lstm:
            rows.append(Row("b_9", "LSTM", (n, tu), LayerSpec("LSTM", tu, tu, activation="tanh")))
            rows.append(Row("b_10", "LSTM", (n, p), LayerSpec("LSTM", tu, p, activation="tanh")))
        rows.append(Row("b_11", "Reshape", (last, n), LayerSpec("Reshape")))
        widths.append(n)
    if spec.has_marker:
        rows.append(Row("c_0", "Input", (p, spec.marker_dim)))
        k = spec.marker_kernel
        rows.append(Row("c_1", "Conv1D", (p, 1), LayerSpec("Conv1D", spec.marker_dim, 1, (k,)), (k,)))
        widths.append(1)
    width = sum(widths)
    rows.append(Row("d_0", "Concat", (p, width), LayerSpec("Concat")))
    rows.append(Row("d_1", "TimeDistributedDense", (p, spec.outputs), LayerSpec("TimeDistributedDense", width, spec.outputs)))
    return rows


class Model:
    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.rows = layer_rows(spec)
        rng = np.random.default_rng(seed)
        self.layers: dict[str, Layer] = {}
        for row in self.rows:
            if row.spec is not None and row.kind not in ("Input",):
                self.layers[row.name] = build_layer(row.name, row.spec, rng)
        self.meta: dict = {}

    # -------------------------------------------------------------- accounting

    def parameters(self) -> list[Node]:
        return [p for layer in self.layers.values() for _, p in sorted(layer.params.items())]

    def named_parameters(self) -> dict[str, Node]:
        return {f"{name}/{k}": p for name, layer in self.layers.items() for k, p in sorted(layer.params.items())}

    def regularized(self) -> list[Node]:
        return [self.layers["d_1"].params["kernel"]]

    def layer_counts(self) -> dict[str, int]:
        return {row.name: (self.layers[row.name].size() if row.name in self.layers else 0) for row in self.rows}

    def param_total(self) -> int:
        return sum(self.layer_counts().values())

    def declared_total(self) -> int:
        return sum(r.params for r in self.rows)

    def conv_subtotal(self) -> int:
        return sum(r.params for r in self.rows if r.kind in ("SeparableConv2D", "Conv2D"))

    @property
    def trained(self) -> bool:
        bns = [l for l in self.layers.values() if isinstance(l, BatchNorm)]
        return all(b.updates > 0 for b in bns)

    # -------------------------------------------------------------- forward

    def _convs(self, prefix: str, x: Node, training: bool) -> Node:
        for idx in range(3):
            x = self.layers[f"{prefix}_{2 * idx + 1}"](x, training)
            x = self.layers[f"{prefix}_{2 * idx + 2}"](x, training)
            if self.spec.bn_before_activation:
                x = T.relu(x)
        return self.layers[f"{prefix}_7"](x, training)

    def forward(self, space, marker=None, time=None, training: bool = False) -> Node:
        """Predict normalized speed, shape ``(B, sites, outputs)``.

        ``space`` is ``(B, sites, window, channels)`` with either the model's
        channels or all six dataset channels; ``time`` defaults to its axis
        transpose.
        """
        s = self.spec
        space = np.asarray(space, dtype=np.float64)
        if space.ndim == 3:
            space = space[None]
        if space.shape[-1] != s.channels and space.shape[-1] == len(ALL_CHANNELS):
            space = space[..., list(s.input_channels)]
        if space.shape[1:] != (s.sites, s.window, s.channels):
            raise ShapeError(f"space input {space.shape[1:]} does not match spec {(s.sites, s.window, s.channels)}")
        B = space.shape[0]
        if time is None:
            time = np.swapaxes(space, 1, 2)
        else:
            time = np.asarray(time, dtype=np.float64)
            if time.ndim == 3:
                time = time[None]
            if time.shape[-1] != s.channels:
                time = time[..., list(s.input_channels)]
            if time.shape[1:] != (s.window, s.sites, s.channels):
                raise ShapeError(f"time input {time.shape[1:]} does not match spec {(s.window, s.sites, s.channels)}")
        if not training and not self.trained:
            raise RuntimeError("model has not been trained: batch-norm moving statistics are undefined")
        parts = []
        if s.has_space:
            x = self._convs("a", Node(space), training)
            x = self.layers["a_8"](x, training)
            if s.has_lstm:
                x = self.layers["a_10"](self.layers["a_9"](x, training), training)
            parts.append(x)
        if s.has_time:
            x = self._convs("b", Node(time), training)
            x = self.layers["b_8"](x, training)
            if s.has_lstm:
                x = self.layers["b_10"](self.layers["b_9"](x, training), training)
            if s.raw_reshape:
                x = T.reshape(x, (B, x.shape[2], x.shape[1]))
            else:
                x = T.transpose(x, 1, 2)
            parts.append(x)
        if s.has_marker:
            if marker is None:
                raise ShapeError("marker input required for this variant")
            marker = np.asarray(marker, dtype=np.float64)
            if marker.ndim == 2:
                marker = marker[None]
            if marker.shape[1:] != (s.sites, s.marker_dim):
                raise ShapeError(f"marker input {marker.shape[1:]} does not match spec {(s.sites, s.marker_dim)}")
            parts.append(self.layers["c_1"](Node(marker), training))
        x = T.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
        return self.layers["d_1"](x, training)

    def predict(self, space, marker=None, time=None, batch_size: int = 64) -> np.ndarray:
        space = np.asarray(space)
        outs = []
        for i in range(0, len(space), batch_size):
            sl = slice(i, i + batch_size)
            outs.append(self.forward(space[sl], None if marker is None else np.asarray(marker)[sl],
                                     None if time is None else np.asarray(time)[sl]).value)
        return np.concatenate(outs, axis=0)

    # -------------------------------------------------------------- state

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: p.value for k, p in self.named_parameters().items()}
        for name, layer in self.layers.items():
            for k, b in layer.buffers.items():
                arrays[f"{name}/{k}"] = b
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray], bn_updates: dict[str, int] | None = None) -> None:
        expected = self.state_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise SpecConflictError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for key, arr in arrays.items():
            if arr.shape != expected[key].shape:
                raise SpecConflictError(f"{key}: stored shape {arr.shape} != model shape {expected[key].shape}")
        for name, layer in self.layers.items():
            for k, p in layer.params.items():
                p.value = np.array(arrays[f"{name}/{k}"], dtype=np.float64, copy=True)
            for k in layer.buffers:
                layer.buffers[k] = np.array(arrays[f"{name}/{k}"], dtype=np.float64, copy=True)
            if isinstance(layer, BatchNorm) and bn_updates is not None:
                layer.updates = int(bn_updates.get(name, 0))

    def snapshot(self) -> dict:
        return {"arrays": {k: v.copy() for k, v in self.state_arrays().items()},
                "bn": self.bn_updates()}

    def restore(self, snap: dict) -> None:
        self.load_state(snap["arrays"], snap["bn"])

    def bn_updates(self) -> dict[str, int]:
        return {n: l.updates for n, l in self.layers.items() if isinstance(l, BatchNorm)}


def build(spec: ModelSpec, seed: int = 0) -> Model:
    model = Model(spec, seed)
    for row in model.rows:
        if row.name in model.layers and model.layers[row.name].size() != row.params:
            raise AssertionError(f"{row.name}: built {model.layers[row.name].size()} params, declared {row.params}")
    return model


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path, scaler=None, extra: dict | None = None) -> str:
    meta = {
        "model_spec": model.spec.to_dict(),
        "seed": model.seed,
        "bn_updates": model.bn_updates(),
        "bn_momentum": BN_MOMENTUM,
        "bn_epsilon": BN_EPSILON,
        "scaler": None if scaler is None else scaler.to_dict(),
    }
    meta.update(model.meta)
    if extra:
        meta.update(extra)
    return container.write(path, "checkpoint", meta, model.state_arrays())


def load_checkpoint(path, expected: ModelSpec | None = None) -> Model:
    meta, arrays = container.read(path, "checkpoint")
    spec = ModelSpec.from_dict(meta["model_spec"])
    if expected is not None and expected != spec:
        diff = {k: (v, getattr(spec, k)) for k, v in dataclasses.asdict(expected).items()
                if getattr(spec, k) != v}
        raise SpecConflictError(f"checkpoint spec differs from requested spec: {diff}")
    model = Model(spec, meta.get("seed", 0))
    model.load_state(arrays, meta["bn_updates"])
    model.meta = {k: v for k, v in meta.items()
                  if k not in ("model_spec", "seed", "bn_updates", "bn_momentum", "bn_epsilon")}
    return model


def checkpoint_scaler(model: Model):
    from .data import Scaler

    d = model.meta.get("scaler")
    return None if d is None else Scaler.from_dict(d)
