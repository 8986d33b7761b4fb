"""Shared experiment plumbing: split, scale and window a corridor; train and score variants."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .data import (CorridorDataset, DaySplit, Sample, SampleSet, Scaler, SPEED, apply_scaler, encode_marker,
                   fit_scaler, infill, make_samples, split_days)
from .model import Model, ModelSpec, build
from .training import EvalReport, FitResult, TrainConfig, evaluate, fit, report_from_predictions


@dataclass
class Prepared:
    raw: CorridorDataset            # infilled, raw units
    scaled: CorridorDataset
    scaler: Scaler
    split: DaySplit
    train: SampleSet
    val: SampleSet
    test: SampleSet | None
    window: int
    horizon: int

    def samples(self, which: str) -> SampleSet:
        out = getattr(self, which)
        if out is None:
            raise ValueError(f"no {which} days in this split")
        return out


def prepare(dataset: CorridorDataset, window: int = 4, horizon: int = 1, n_val: int | None = None,
            n_test: int | None = None, split_seed: int = 0, infill_policy: str = "carry_forward") -> Prepared:
    raw = dataset
    if np.isnan(dataset.values).any():
        raw, _ = infill(dataset, infill_policy)
    split = split_days(raw.dates, n_val, n_test, split_seed)
    scaler = fit_scaler(raw.select_days(split.train))
    scaled = apply_scaler(raw, scaler)
    mk = lambda days: make_samples(scaled, days, window, horizon) if days else None  # noqa: E731
    return Prepared(raw, scaled, scaler, split, mk(split.train), mk(split.val), mk(split.test), window, horizon)


def raw_sample(raw: CorridorDataset, day: int, end_slot: int, window: int, horizon: int = 1) -> Sample:
    """The unscaled sample whose history ends just before ``end_slot``."""
    if not window <= end_slot <= 92 - horizon:
        raise ValueError(f"end slot {end_slot} leaves no room for window {window} and horizon {horizon}")
    values = raw.values[:, day]
    date = raw.dates[day]
    target_slot = end_slot + horizon - 1
    return Sample(values[:, end_slot - window:end_slot].copy(), np.repeat(encode_marker(date, target_slot)[None], len(raw.sites), 0),
                  values[:, target_slot:target_slot + 1, SPEED].copy(), (date, end_slot))


def model_spec(variant: str, sites: int, window: int, horizon: int, **scale) -> ModelSpec:
    return ModelSpec(variant, sites=sites, window=window, horizon=horizon, **scale)


def train_variant(prep: Prepared, variant: str, config: TrainConfig, seed: int = 0, **scale) -> tuple[Model, FitResult]:
    spec = model_spec(variant, len(prep.raw.sites), prep.window, prep.horizon, **scale)
    model = build(spec, seed)
    result = fit(model, prep.train, prep.val, config)
    return model, result


def naive_report(samples: SampleSet) -> EvalReport:
    return report_from_predictions(baselines.naive_forecast(samples), samples.target)


def sfc_report(samples: SampleSet, scaler: Scaler, sites: list[str], overrides: dict[str, str] | None = None) -> EvalReport:
    params = baselines.site_params(sites, overrides)
    return report_from_predictions(baselines.sfc_predict(samples, params, scaler), samples.target)


# test id, variant or baseline, description
ABLATION = (
    ("a", "DCLSTMt", "D-CLSTM-t: separable convolutions, both branches, time marker"),
    ("b", "DCLSTMt_Conv2D", "D-CLSTM-t with traditional convolutions"),
    ("c", "CLSTM_S_t", "space branch and marker only"),
    ("d", "CLSTM_T_t", "time branch and marker only"),
    ("e", "DCLSTM_noMarker", "both branches without the time marker"),
    ("f", "CNN_t", "convolutional layers only, no LSTM"),
    ("h", "naive", "naive forecast: last observed speed"),
    ("i", "sfc", "speed-flow curve"),
    ("j", "SpeedOnly", "D-CLSTM-t on the speed channel only"),
    ("k", "FlowOnly", "D-CLSTM-t on the five flow channels only"),
)


@dataclass
class AblationRow:
    test_id: str
    description: str
    mse: float | None = None
    mae: float | None = None
    extra: dict = field(default_factory=dict)


def ablate(prep: Prepared, config: TrainConfig, seed: int = 0, skip_training: bool = False,
           tests: str | None = None, overrides: dict[str, str] | None = None, on_row=None, **scale) -> list[AblationRow]:
    """One row per test in table order; skipped tests keep empty metrics."""
    rows = []
    for tid, what, desc in ABLATION:
        row = AblationRow(tid, desc)
        if what == "naive":
            rep = naive_report(prep.val)
        elif what == "sfc":
            rep = sfc_report(prep.val, prep.scaler, prep.raw.sites, overrides) if prep.window >= 4 else None
        elif skip_training or (tests is not None and tid not in tests):
            rep = None
        else:
            model, res = train_variant(prep, what, config, seed, **scale)
            rep = evaluate(model, prep.val)
            row.extra = {"variant": what, "params": model.param_total(), "best_epoch": res.best_epoch}
        if rep is not None:
            row.mse, row.mae = rep.mse, rep.mae
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def scale_kwargs(filters=None, space_units=None) -> dict:
    out = {}
    if filters is not None:
        out["filters"] = tuple(filters)
    if space_units is not None:
        out["space_units"] = int(space_units)
    return out


def replace_config(config: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(config, **{k: v for k, v in kw.items() if v is not None})
