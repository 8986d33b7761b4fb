"""Loss, Adam, the epoch loop with early stopping, grid search and metrics."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import SampleSet
from .model import Model
from .tensor import Node

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.003
    l2: float = 0.0002
    batch_size: int = 4
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    shuffle: bool = True
    init_output_bias: bool = True   # start the final dense bias at the mean training target

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def loss(pred: Node, target, model: Model | None = None, l2: float = 0.0) -> Node:
    """Mean squared error plus ``l2`` times the squared final-dense weights."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise T.ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    out = T.mean(T.square(pred - Node(target)))
    if model is not None and l2 > 0:
        for w in model.regularized():
            out = out + T.sum_(T.square(w)) * l2
    return out


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied to ``params`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Node], lr: float = 0.003):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.zeros_like([p.value for p in self.params])

    def step(self) -> None:
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in self.params]
        adam_step([p.value for p in self.params], grads, self.state, self.lr)

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    mse: float
    mae: float
    predictions: np.ndarray     # (N, p, h), normalized speed
    targets: np.ndarray
    speed_divisor: float = 100.0

    @property
    def residuals(self) -> np.ndarray:
        return self.targets - self.predictions

    @property
    def n_predictions(self) -> int:
        return int(self.predictions.size)

    @property
    def mse_mph(self) -> float:
        return self.mse * self.speed_divisor ** 2

    @property
    def mae_mph(self) -> float:
        return self.mae * self.speed_divisor


def report_from_predictions(pred, target, speed_divisor: float = 100.0) -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValueError("no predictions to evaluate")
    r = target - pred
    return EvalReport(float(np.mean(r * r)), float(np.mean(np.abs(r))), pred, target, speed_divisor)


def evaluate(model: Model, samples: SampleSet, batch_size: int = 64) -> EvalReport:
    if len(samples) == 0:
        raise ValueError("empty sample set")
    pred = model.predict(samples.space, samples.marker, batch_size=batch_size)
    return report_from_predictions(pred, samples.target)


# ---------------------------------------------------------------- fitting

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float


@dataclass
class FitResult:
    history: list[EpochRecord]
    best_epoch: int
    wall_times: list[float] = field(default_factory=list)

    @property
    def best(self) -> EpochRecord:
        return self.history[self.best_epoch - 1]


def _diagnostics(model: Model) -> str:
    norms = []
    for name, p in model.named_parameters().items():
        v = p.value
        norms.append(f"{name}={np.sqrt(np.sum(v * v)):.4g}")
    return ", ".join(norms)


def fit(model: Model, train: SampleSet, val: SampleSet, config: TrainConfig,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> FitResult:
    """Mini-batch Adam with early stopping on validation MSE.

    The model ends up holding the parameters of the best validation epoch.
    """
    if config.init_output_bias and "epoch" not in model.meta:
        model.layers["d_1"].params["bias"].value[...] = float(np.mean(train.target))
    params = model.parameters()
    opt = Adam(params, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(train)
    history: list[EpochRecord] = []
    walls: list[float] = []
    best_mse, best_epoch, best_snap = np.inf, 0, None
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            pred = model.forward(train.space[idx], train.marker[idx], training=True)
            value = loss(pred, train.target[idx], model, config.l2)
            lv = float(value.value)
            if not np.isfinite(lv):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}; parameter norms: {_diagnostics(model)}")
            opt.zero_grad()
            T.backward(value)
            opt.step()
            total += lv * len(idx)
            count += len(idx)
        rep = evaluate(model, val)
        if not np.isfinite(rep.mse):
            raise NumericError(f"non-finite validation MSE at epoch {epoch}; parameter norms: {_diagnostics(model)}")
        rec = EpochRecord(epoch, total / count, rep.mse, rep.mae)
        history.append(rec)
        walls.append(time.perf_counter() - t0)
        log.info("epoch %d train_loss=%.6g val_mse=%.6g val_mae=%.6g", epoch, rec.train_loss, rec.val_mse, rec.val_mae)
        if on_epoch is not None:
            on_epoch(rec)
        if rep.mse < best_mse:
            best_mse, best_epoch, best_snap = rep.mse, epoch, model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.restore(best_snap)
    model.meta.update({"epoch": best_epoch, "history": [dataclasses.asdict(h) for h in history],
                       "train_config": config.to_dict(),
                       "adam": {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS}})
    return FitResult(history, best_epoch, walls)


def write_epoch_log(path, history: Sequence[EpochRecord], header: str | None = None) -> None:
    """One CSV row per epoch; ``header`` lines are written first as ``#`` comments."""
    with open(path, "w", newline="") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mse", "val_mae"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_mse), repr(h.val_mae)])


# ---------------------------------------------------------------- grid search

@dataclass
class GridRow:
    learning_rate: float
    l2: float
    batch_size: int
    val_mse: float
    val_mae: float


def grid_search(factory: Callable[[], Model], train: SampleSet, val: SampleSet,
                learning_rates: Sequence[float] = (0.003,), l2s: Sequence[float] = (0.0002,),
                batch_sizes: Sequence[int] = (4,), base: TrainConfig | None = None,
                epochs: int = 5) -> tuple[TrainConfig, list[GridRow]]:
    """Train every combination for ``epochs`` epochs and rank by validation MSE."""
    base = base or TrainConfig()
    if not (learning_rates and l2s and batch_sizes):
        raise ValueError("grids must be nonempty")
    rows = []
    for lr, l2, bs in itertools.product(learning_rates, l2s, batch_sizes):
        cfg = dataclasses.replace(base, learning_rate=lr, l2=l2, batch_size=bs, max_epochs=epochs)
        model = factory()
        res = fit(model, train, val, cfg)
        rows.append(GridRow(lr, l2, bs, res.best.val_mse, res.best.val_mae))
    rows.sort(key=lambda r: r.val_mse)
    best = rows[0]
    return dataclasses.replace(base, learning_rate=best.learning_rate, l2=best.l2, batch_size=best.batch_size), rows
