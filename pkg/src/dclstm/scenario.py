"""Incident what-if runs: override flows and speeds, compare forecasts."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import BAND_CHANNELS, SPEED, TOTAL, Sample, Scaler
from .model import Model


@dataclass(frozen=True)
class IncidentSpec:
    sites: tuple[int, ...]
    slots: tuple[int, int]        # [start, stop) positions within the input window
    flow: float = 220.0           # vehicles per 15-minute slot
    speed: float = 5.0            # mph

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(sorted(int(s) for s in self.sites)))
        a, b = self.slots
        if not 0 <= a < b:
            raise ValueError(f"slot range {self.slots} is empty or negative")
        if self.flow < 0 or self.speed < 0:
            raise ValueError("override flow and speed must be nonnegative")


@dataclass
class ImpactReport:
    baseline: np.ndarray          # (p,) mph, first output column
    incident: np.ndarray
    observed: np.ndarray | None
    sites: tuple[int, ...]
    extent: int
    spacing_km: float
    horizon_minutes: float
    threshold: float

    @property
    def delta(self) -> np.ndarray:
        return self.incident - self.baseline

    @property
    def extent_km(self) -> float:
        return self.extent * self.spacing_km

    @property
    def propagation_kmh(self) -> float:
        return self.extent_km / (self.horizon_minutes / 60.0)

    def upstream_mean_delta(self, count: int = 5) -> float:
        start = max(self.sites) + 1
        up = self.delta[start:start + count]
        return float(up.mean()) if up.size else 0.0

    def rows(self) -> list[dict]:
        out = []
        for s in range(len(self.baseline)):
            out.append({"site": s,
                        "observed_mph": "" if self.observed is None else repr(float(self.observed[s])),
                        "baseline_mph": repr(float(self.baseline[s])),
                        "incident_mph": repr(float(self.incident[s])),
                        "delta_mph": repr(float(self.delta[s])),
                        "incident_site": int(s in self.sites)})
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def summary(self) -> dict:
        return {"incident_sites": list(self.sites), "upstream_extent_sites": self.extent,
                "upstream_extent_km": self.extent_km, "propagation_kmh": self.propagation_kmh,
                "mean_upstream_delta_mph_5": self.upstream_mean_delta(5), "threshold_mph": self.threshold}


def inject(sample: Sample, incident: IncidentSpec, scaler: Scaler | None = None) -> Sample:
    """Apply the override to a raw-unit sample, then rescale with ``scaler`` if given.

    Band flows keep their original shares of the new total; a zero original
    total puts everything in the first band.
    """
    space = np.array(sample.space, dtype=np.float64, copy=True)
    p, n, _ = space.shape
    a, b = incident.slots
    if b > n:
        raise ValueError(f"incident slots {incident.slots} fall outside the {n}-slot window")
    if any(not 0 <= s < p for s in incident.sites):
        raise ValueError(f"incident sites {incident.sites} outside corridor of {p} sites")
    for s in incident.sites:
        for k in range(a, b):
            cell = space[s, k]
            bands = cell[list(BAND_CHANNELS)]
            total = bands.sum()
            if total != incident.flow:
                if total > 0:
                    cell[list(BAND_CHANNELS)] = bands / total * incident.flow
                else:
                    cell[list(BAND_CHANNELS)] = (incident.flow, 0.0, 0.0, 0.0)
            cell[TOTAL] = incident.flow
            cell[SPEED] = incident.speed
    if scaler is not None:
        space = scaler.transform(space)
    return Sample(space, np.array(sample.marker, copy=True), np.array(sample.target, copy=True), sample.anchor)


def assess(model: Model, raw_sample: Sample, incident: IncidentSpec, scaler: Scaler,
           threshold: float = 5.0, spacing_km: float = 0.5, slot_minutes: float = 15.0) -> ImpactReport:
    """Forecast with and without the incident and measure the upstream response.

    ``raw_sample`` is in raw units.  The upstream extent is the run of sites
    just upstream of the incident whose forecast drops by at least
    ``threshold`` mph.
    """
    if not model.trained:
        raise RuntimeError("assess needs a trained model")
    base = scaler.transform(raw_sample.space)
    hit = inject(raw_sample, incident, scaler).space
    marker = raw_sample.marker[None]
    base_mph = scaler.speed_to_mph(model.predict(base[None], marker)[0, :, 0])
    hit_mph = scaler.speed_to_mph(model.predict(hit[None], marker)[0, :, 0])
    delta = hit_mph - base_mph
    extent = 0
    for s in range(max(incident.sites) + 1, len(delta)):
        if delta[s] <= -threshold:
            extent += 1
        else:
            break
    horizon = model.spec.horizon * slot_minutes
    observed = None
    if raw_sample.target is not None:
        observed = np.asarray(raw_sample.target)[:, -1]
    return ImpactReport(base_mph, hit_mph, observed, incident.sites, extent, spacing_km, horizon, threshold)


def read_scenario(path, window: int | None = None) -> tuple[IncidentSpec, dict]:
    """Parse a ``key = value`` scenario file.

    Recognised keys: ``sites`` (comma list), ``slots`` (``start,stop`` within
    the window), ``flow``, ``speed``, ``date`` (ISO), ``end_slot`` (first
    target slot of the sample), ``threshold``.  Without ``slots`` the
    incident covers the last slot of a ``window``-slot history.
    """
    raw: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: expected key = value, got {line!r}")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    if "sites" not in raw:
        raise ValueError(f"{path}: scenario needs a sites line")
    sites = tuple(int(s) for s in raw.pop("sites").split(","))
    if "slots" in raw:
        slots = tuple(int(s) for s in raw.pop("slots").split(","))
        if len(slots) != 2:
            raise ValueError(f"{path}: slots needs start,stop")
    elif window is not None:
        slots = (window - 1, window)
    else:
        raise ValueError(f"{path}: no slots given and no window to default from")
    spec = IncidentSpec(sites, slots, float(raw.pop("flow", 220.0)), float(raw.pop("speed", 5.0)))
    return spec, raw
