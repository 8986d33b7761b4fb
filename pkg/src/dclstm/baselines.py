"""Naive persistence forecast and the COBA-style speed-flow curve."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import BAND_CHANNELS, SPEED, SampleSet, Scaler

KPH_PER_MPH = 1.609344
HGV_PCU = 2.3
DEFAULT_LINK_KM = 0.5


@dataclass(frozen=True)
class SfcParams:
    free_speed: float        # S0, kph
    capacity_speed: float    # S2, kph
    capacity: float          # pcu per hour
    power: float             # n
    length: float = DEFAULT_LINK_KM
    hgv_pcu: float = HGV_PCU
    a: float = 0.0           # derived: t(V) = L/S0 + a * V**n, hours

    def travel_time(self, flow_pcu) -> np.ndarray:
        """Link travel time in hours at hourly flow ``flow_pcu``."""
        v = np.clip(np.asarray(flow_pcu, dtype=np.float64), 0.0, None)
        return self.length / self.free_speed + self.a * v ** self.power

    def speed_kph(self, flow_pcu) -> np.ndarray:
        return self.length / self.travel_time(flow_pcu)


def sfc_calibrate(free_speed: float, capacity_speed: float, capacity: float, power: float,
                  length: float = DEFAULT_LINK_KM, hgv_pcu: float = HGV_PCU) -> SfcParams:
    """Solve the delay coefficient so the curve passes through (capacity, S2)."""
    if not 0 < capacity_speed < free_speed:
        raise ValueError(f"need 0 < S2 < S0, got S0={free_speed}, S2={capacity_speed}")
    if capacity <= 0 or power <= 0 or length <= 0:
        raise ValueError("capacity, power and link length must be positive")
    a = length * (1.0 / capacity_speed - 1.0 / free_speed) / capacity ** power
    return SfcParams(free_speed, capacity_speed, capacity, power, length, hgv_pcu, a)


# Rural motorway rows of the COBA speed-flow table
TABLE3 = {
    "D4": dict(free_speed=113.0, capacity_speed=81.0, capacity=9320.0, power=2.8),
    "D3": dict(free_speed=113.0, capacity_speed=81.0, capacity=6990.0, power=2.8),
}


def table3(row: str, length: float = DEFAULT_LINK_KM) -> SfcParams:
    try:
        return sfc_calibrate(**TABLE3[row], length=length)
    except KeyError:
        raise ValueError(f"unknown speed-flow row {row!r}; choose from {sorted(TABLE3)}") from None


def load_site_overrides(path) -> dict[str, str]:
    """Read ``site_id,table3_row`` lines."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["site_id"].strip()] = row["table3_row"].strip()
    return out


def naive_forecast(samples: SampleSet) -> np.ndarray:
    """Repeat the last observed speed for every horizon step, ``(N, p, h)``."""
    last = samples.space[:, :, -1, SPEED]
    return np.repeat(last[..., None], samples.target.shape[-1], axis=-1)


def hourly_pcu(raw_space: np.ndarray, hgv_pcu: float = HGV_PCU) -> np.ndarray:
    """Sum the last four slots of band flows with the 11.6 m+ band weighted, ``(..., p)``."""
    if raw_space.shape[-2] < 4:
        raise ValueError("the speed-flow curve needs at least four history slots")
    weights = np.array([1.0, 1.0, 1.0, hgv_pcu])
    bands = raw_space[..., -4:, :][..., list(BAND_CHANNELS)]
    return (bands * weights).sum(axis=(-1, -2))


def sfc_predict(samples: SampleSet, params: SfcParams | dict[int, SfcParams], scaler: Scaler,
                sites: list[str] | None = None) -> np.ndarray:
    """Speed-flow-curve prediction in normalized speed units, ``(N, p, h)``.

    ``params`` is one parameter set for every site or a mapping from site
    index to parameters.
    """
    raw = scaler.inverse(samples.space)
    flow = hourly_pcu(raw)                   # (N, p)
    p = flow.shape[-1]
    if isinstance(params, SfcParams):
        kph = params.speed_kph(flow)
    else:
        kph = np.stack([params[s].speed_kph(flow[:, s]) for s in range(p)], axis=-1)
    mph = kph / KPH_PER_MPH
    pred = mph / scaler.speed_divisor
    return np.repeat(pred[..., None], samples.target.shape[-1], axis=-1)


def site_params(sites: list[str], overrides: dict[str, str] | None = None, default: str = "D4",
                length: float = DEFAULT_LINK_KM) -> dict[int, SfcParams]:
    overrides = overrides or {}
    return {i: table3(overrides.get(s, default), length) for i, s in enumerate(sites)}
