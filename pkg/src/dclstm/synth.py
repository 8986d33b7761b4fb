"""Seeded synthetic motorway corridors.

Flows follow a weekday demand profile with AM and PM peaks, stepped at ramp
sites.  Speed comes from a two-branch speed-flow relation: a gently falling
free-flow branch, and congested troughs that start at the downstream end and
move upstream at a fixed queue speed, with a matching drop in flow.  Monday
mornings and Friday afternoons are heavier, and Friday's PM peak starts
earlier.  Random incidents add localized queues that grow upstream.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass

import numpy as np

from .data import OBSERVED, MISSING, SLOTS, SPEED, CorridorDataset, weekdays

START = dt.date(2017, 9, 4)


@dataclass(frozen=True)
class Event:
    """A congestion source at ``site`` starting at ``slot`` on day index ``day``."""
    day: int
    site: int
    slot: int
    depth: float = 40.0         # mph removed at the source
    duration: int = 4           # slots at the source
    reach: int = 6              # upstream sites the queue reaches


@dataclass(frozen=True)
class SynthParams:
    free_speed: float = 70.0
    free_drop: float = 6.0              # mph lost on the free branch at capacity
    capacity: float = 1900.0            # vehicles per 15 min, all lanes
    spacing_km: float = 0.5
    queue_speed_kmh: float = 6.0
    noise_sd: float = 2.0               # white noise on speed, mph
    ar_sd: float = 0.5                  # AR(1) innovation sd, mph
    ar_phi: float = 0.5
    flow_noise: float = 0.04            # relative
    am_depth: float = 28.0
    pm_depth: float = 20.0
    peak_reach: float = 0.7             # fraction of the corridor the peak queues reach
    day_modifiers: bool = True
    day_level: float = 4.0              # scale of the corridor-wide weekday speed offsets, mph
    ramp_sites: tuple[int, ...] | None = None
    ramp_factors: tuple[float, ...] = (0.85, 1.12)
    incident_rate: float = 0.2          # random incidents per day
    events: tuple[Event, ...] = ()
    missing_rate: float = 0.0
    band_shares: tuple[float, float, float, float] = (0.80, 0.07, 0.05, 0.08)
    start: dt.date = START

    @property
    def delay_hours(self) -> float:
        """Time for a queue to move one site upstream."""
        return self.spacing_km / self.queue_speed_kmh

    @property
    def speed_noise_sd(self) -> float:
        """Stationary standard deviation of the additive speed noise."""
        return float(np.sqrt(self.noise_sd ** 2 + self.ar_sd ** 2 / (1 - self.ar_phi ** 2)))

    def free_branch_speed(self, flow) -> np.ndarray:
        q = np.clip(np.asarray(flow, dtype=np.float64) / self.capacity, 0.0, None)
        return self.free_speed - self.free_drop * q ** 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["start"] = self.start.isoformat()
        d["events"] = [dataclasses.asdict(e) for e in self.events]
        return d


# AM peak magnitude, PM peak magnitude and PM onset shift (hours) per weekday
_DAY_AM = (1.5, 0.9, 1.0, 1.05, 0.8)
_DAY_PM = (0.9, 1.0, 1.0, 1.1, 1.6)
_DAY_PM_SHIFT = (0.0, 0.0, 0.0, 0.0, -1.0)
# relative weekday speed level: slow Mondays, quick Fridays
_DAY_LEVEL = (-1.0, 0.2, 0.0, -0.3, 1.0)


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gauss(h, mu, sd):
    return np.exp(-0.5 * ((h - mu) / sd) ** 2)


def demand_profile(hours: np.ndarray) -> np.ndarray:
    """Weekday total-flow demand (vehicles per 15 min) at clock ``hours``."""
    day = _sig((hours - 5.5) / 0.4) * (1.0 - _sig((hours - 21.0) / 0.8))
    return 150.0 + 1250.0 * day + 380.0 * _gauss(hours, 7.75, 1.0) + 320.0 * _gauss(hours, 17.5, 1.2)


def slot_hours() -> np.ndarray:
    return 1.0 + (np.arange(SLOTS) + 0.5) * 0.25


def _segment_factors(sites: int, p: SynthParams) -> np.ndarray:
    ramps = p.ramp_sites
    if ramps is None:
        ramps = tuple(int(round(f * sites)) for f in (0.3, 0.65))
    fac = np.ones(sites)
    for r, f in zip(ramps, p.ramp_factors):
        fac[r:] *= f
    return fac


def _trough(hours, onset, end, rise=0.12, fall=0.3):
    return _sig((hours - onset) / rise) * (1.0 - _sig((hours - end) / fall))


def event_profile(event: Event, sites: int, p: SynthParams) -> tuple[np.ndarray, np.ndarray]:
    """Speed reduction (mph) and flow multiplier, each ``(sites, SLOTS)``, for one event."""
    red = np.zeros((sites, SLOTS))
    mult = np.ones((sites, SLOTS))
    k = np.arange(SLOTS)
    delay = p.delay_hours / 0.25   # slots per site
    for j in range(event.reach + 1):
        s = event.site + j
        if s >= sites:
            break
        onset = event.slot + j * delay
        end = event.slot + event.duration + 0.5 * j * delay
        on = np.clip(k - onset + 1.0, 0.0, 1.0) * (k < end)
        depth = event.depth * (1.0 - 0.5 * j / max(event.reach, 1))
        red[s] = np.maximum(red[s], depth * on)
    # downstream of the blockage traffic thins out and speeds up slightly
    src = (k >= event.slot) & (k < event.slot + event.duration)
    for s in range(max(0, event.site - 4), event.site):
        mult[s, src] = 0.7
        red[s, src] = -2.0
    return red, mult


def synthesize_corridor(seed: int = 0, sites: int = 60, days: int = 42,
                        params: SynthParams | None = None) -> CorridorDataset:
    """Deterministic corridor in raw units (vehicles per 15 min, mph)."""
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    dates = weekdays(p.start, days)
    hours = slot_hours()
    site_idx = np.arange(sites)
    seg = _segment_factors(sites, p)
    site_bias = rng.uniform(0.8, 1.2, size=sites)
    reach = max(p.peak_reach * sites, 1.0)
    site_weight = np.clip(1.0 - site_idx / reach, 0.0, 1.0) ** 0.7 * site_bias
    shares = np.asarray(p.band_shares) * rng.uniform(0.85, 1.15, size=(sites, 4))
    shares /= shares.sum(axis=1, keepdims=True)
    onset_shift = site_idx * p.delay_hours

    events = list(p.events)
    for d in range(days):
        for _ in range(rng.poisson(p.incident_rate)):
            events.append(Event(d, int(rng.integers(0, sites)), int(rng.integers(12, 84)),
                                float(rng.uniform(25.0, 45.0)), int(rng.integers(2, 7)), int(rng.integers(2, 9))))

    values = np.empty((sites, days, SLOTS, 6))
    for d, date in enumerate(dates):
        wd = date.weekday()
        am = _DAY_AM[wd] if p.day_modifiers else 1.0
        pm = _DAY_PM[wd] if p.day_modifiers else 1.0
        shift = _DAY_PM_SHIFT[wd] if p.day_modifiers else 0.0
        h = hours[None, :]
        os_ = onset_shift[:, None]
        trough = (p.am_depth * am * _trough(h, 6.5 + os_, 9.0 + 0.5 * os_)
                  + p.pm_depth * pm * _trough(h, 16.0 + shift + os_, 18.75 + 0.5 * os_))
        trough *= site_weight[:, None]
        flow_mult = np.ones((sites, SLOTS))
        for ev in events:
            if ev.day != d:
                continue
            red, mult = event_profile(ev, sites, p)
            trough = np.maximum(trough, np.maximum(red, 0.0)) + np.minimum(red, 0.0)
            flow_mult *= mult

        demand = demand_profile(hours)[None, :] * seg[:, None] * (1.03 if wd == 4 else 1.0)
        congestion = np.clip(trough / p.free_speed, 0.0, 1.0)
        total = demand * (1.0 - 0.6 * np.clip(1.5 * congestion, 0.0, 1.0)) * flow_mult
        total *= 1.0 + p.flow_noise * rng.standard_normal(total.shape)
        total = np.clip(total, 0.0, None)
        bands = np.round(total[..., None] * shares[:, None, :])

        ar = np.zeros((sites, SLOTS))
        innov = p.ar_sd * rng.standard_normal((sites, SLOTS))
        ar[:, 0] = innov[:, 0] / np.sqrt(1 - p.ar_phi ** 2)
        for k in range(1, SLOTS):
            ar[:, k] = p.ar_phi * ar[:, k - 1] + innov[:, k]
        level = p.day_level * _DAY_LEVEL[wd] if p.day_modifiers else 0.0
        speed = (p.free_branch_speed(demand * flow_mult) - trough + ar + level
                 + p.noise_sd * rng.standard_normal((sites, SLOTS)))
        speed = np.clip(speed, 3.0, 85.0)

        values[:, d, :, :4] = bands
        values[:, d, :, 4] = bands.sum(axis=-1)
        values[:, d, :, SPEED] = np.round(speed, 1)

    prov = np.full((sites, days, SLOTS), OBSERVED, dtype=np.int8)
    if p.missing_rate > 0:
        target = int(round(p.missing_rate * sites * days * SLOTS))
        blanked = 0
        while blanked < target:
            s, d = int(rng.integers(sites)), int(rng.integers(days))
            length = int(rng.integers(1, 7))
            a = int(rng.integers(0, SLOTS - length))
            fresh = int((prov[s, d, a:a + length] != MISSING).sum())
            values[s, d, a:a + length] = np.nan
            prov[s, d, a:a + length] = MISSING
            blanked += fresh

    names = [f"S{i:03d}" for i in range(sites)]
    meta = {"source": "synthetic", "seed": seed, "synth_params": p.to_dict(),
            "events": [dataclasses.asdict(e) for e in events]}
    return CorridorDataset(names, dates, values, prov, meta)
