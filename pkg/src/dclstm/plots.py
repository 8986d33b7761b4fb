"""Figure emitters: every chart is written as an SVG plus the CSV it was drawn from."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CHANNELS, SLOTS, SPEED, TOTAL, CorridorDataset, slot_time  # noqa: E402

plt.rcParams["svg.hashsalt"] = "dclstm"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, base: Path) -> Path:
    path = base.with_suffix(".svg")
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _write_rows(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


def flow_speed_scatter(ds: CorridorDataset, base, sites: Sequence[int] | None = None,
                       flow_range: tuple[float, float] | None = None) -> int:
    """Total flow against speed for every valid cell; returns the point count."""
    base = Path(base)
    idx = list(range(len(ds.sites))) if sites is None else list(sites)
    v = ds.values[idx]
    flow, speed = v[..., TOTAL].ravel(), v[..., SPEED].ravel()
    ok = np.isfinite(flow) & np.isfinite(speed)
    if flow_range is not None:
        ok &= (flow >= flow_range[0]) & (flow <= flow_range[1])
    flow, speed = flow[ok], speed[ok]
    _write_rows(base.with_suffix(".csv"), ["total_flow", "speed_mph"], zip(flow.tolist(), speed.tolist()))
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.scatter(flow * 4, speed, s=2, alpha=0.3, color="tab:blue", rasterized=False)
    ax.set_xlabel("flow (veh/h)")
    ax.set_ylabel("speed (mph)")
    ax.set_title("Flow-speed scatter")
    _save(fig, base)
    return int(ok.sum())


def space_time_heatmap(ds: CorridorDataset, base, day: int = 0, channel: int = SPEED) -> np.ndarray:
    """Sites by slots grid for one day and one channel; returns the grid."""
    base = Path(base)
    grid = ds.values[:, day, :, channel]
    header = ["site"] + [slot_time(k).strftime("%H:%M") for k in range(SLOTS)]
    _write_rows(base.with_suffix(".csv"), header,
                ([s] + grid[i].tolist() for i, s in enumerate(ds.sites)))
    fig, ax = plt.subplots(figsize=(9, 4.5))
    cmap = "RdYlGn" if channel == SPEED else "viridis"
    im = ax.imshow(grid, aspect="auto", origin="lower", cmap=cmap, interpolation="nearest")
    ticks = np.arange(0, SLOTS, 12)
    ax.set_xticks(ticks, [slot_time(k).strftime("%H:%M") for k in ticks])
    ax.set_xlabel("time of day")
    ax.set_ylabel("site (0 = downstream)")
    ax.set_title(f"{CHANNELS[channel]} on {ds.dates[day].isoformat()}")
    fig.colorbar(im, ax=ax)
    _save(fig, base)
    return grid


def prediction_panel(observed: np.ndarray, predicted: np.ndarray, base, labels: Sequence[str] | None = None,
                     title: str = "") -> np.ndarray:
    """Observed and predicted series on top, residual (observed minus predicted) below."""
    base = Path(base)
    observed = np.asarray(observed, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    resid = observed - predicted
    x = np.arange(len(observed))
    labels = list(labels) if labels is not None else [str(i) for i in x]
    _write_rows(base.with_suffix(".csv"), ["index", "label", "observed", "predicted", "residual"],
                zip(x.tolist(), labels, observed.tolist(), predicted.tolist(), resid.tolist()))
    fig, (a, b) = plt.subplots(2, 1, figsize=(8, 5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    a.plot(x, observed, color="black", label="observed")
    a.plot(x, predicted, color="tab:red", linestyle="--", label="predicted")
    a.set_ylabel("speed (mph)")
    a.legend(loc="lower left")
    a.set_title(title)
    b.bar(x, resid, color="tab:gray")
    b.axhline(0.0, color="black", linewidth=0.5)
    b.set_ylabel("residual")
    _save(fig, base)
    return resid


def incident_chart(report, base) -> None:
    """Observed, baseline and incident predictions along the corridor."""
    base = Path(base)
    report.write_csv(base.with_suffix(".csv"))
    x = np.arange(len(report.baseline))
    fig, ax = plt.subplots(figsize=(8, 4))
    if report.observed is not None:
        ax.plot(x, report.observed, color="black", label="observed")
    ax.plot(x, report.baseline, color="tab:blue", label="prediction")
    ax.plot(x, report.incident, color="tab:red", linestyle="--", label="prediction with incident")
    for s in report.sites:
        ax.axvline(s, color="tab:orange", alpha=0.4)
    ax.set_xlabel("site (0 = downstream)")
    ax.set_ylabel("speed (mph)")
    ax.legend(loc="lower right")
    _save(fig, base)


def sweep_chart(xs: Sequence[float], series: dict[str, Sequence[float]], base, xlabel: str, ylabel: str = "MAE") -> None:
    base = Path(base)
    names = list(series)
    _write_rows(base.with_suffix(".csv"), [xlabel] + names,
                ([x] + [float(series[n][i]) for n in names] for i, x in enumerate(xs)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for n in names:
        ax.plot(xs, series[n], marker="o", label=n)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    _save(fig, base)
