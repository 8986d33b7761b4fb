"""WebTRIS-style ingestion, cleaning, scaling and windowing.

Every day keeps 92 fifteen-minute slots (01:00 to 24:00); slot ``k`` starts
at ``01:00 + 15k`` minutes.  Channels are the four length-band flows, total
flow and average speed in mph, in that order.  Sites are ordered from the
most downstream (index 0) to the most upstream.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import container

log = logging.getLogger(__name__)

SLOTS = 92
SLOT_MINUTES = 15
FIRST_MINUTE = 60  # 00:00-01:00 is dropped
CHANNELS = ("flow_0_52", "flow_52_66", "flow_66_116", "flow_116p", "total_flow", "avg_speed_mph")
FLOW_CHANNELS = (0, 1, 2, 3, 4)
BAND_CHANNELS = (0, 1, 2, 3)
TOTAL = 4
SPEED = 5
HEADER = ("site_id", "timestamp") + CHANNELS
SPEED_DIVISOR = 100.0
MAX_SPEED = 120.0
TOTAL_TOLERANCE = 0.5
MARKER_DIM = 8

OBSERVED, SAME_DAY, PREV_WEEK, MISSING = 0, 1, 2, -1


class DataError(ValueError):
    pass


def slot_of(ts: dt.datetime) -> int | None:
    """Slot index of a timestamp, or None inside the dropped midnight hour."""
    minutes = ts.hour * 60 + ts.minute
    if minutes < FIRST_MINUTE:
        return None
    return (minutes - FIRST_MINUTE) // SLOT_MINUTES


def slot_time(slot: int) -> dt.time:
    m = FIRST_MINUTE + SLOT_MINUTES * slot
    return dt.time(m // 60 % 24, m % 60)


def weekdays(start: dt.date, count: int) -> list[dt.date]:
    out, d = [], start
    while len(out) < count:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


# ---------------------------------------------------------------- ingestion

@dataclass
class SiteDay:
    site_id: str
    date: dt.date
    values: np.ndarray = field(default_factory=lambda: np.full((SLOTS, 6), np.nan))
    valid: np.ndarray = field(default_factory=lambda: np.zeros(SLOTS, dtype=bool))


@dataclass
class IngestLog:
    rows: int = 0
    invalid_rows: list[tuple[int, str]] = field(default_factory=list)
    consistency_warnings: list[tuple[int, str]] = field(default_factory=list)
    midnight_rows: int = 0
    weekend_rows: int = 0

    def summary(self) -> str:
        lines = [f"rows read: {self.rows}",
                 f"invalid rows: {len(self.invalid_rows)}",
                 f"total-flow consistency warnings: {len(self.consistency_warnings)}",
                 f"rows in dropped midnight hour: {self.midnight_rows}",
                 f"weekend rows skipped: {self.weekend_rows}"]
        for line_no, why in self.invalid_rows:
            lines.append(f"  invalid line {line_no}: {why}")
        for line_no, why in self.consistency_warnings:
            lines.append(f"  warning line {line_no}: {why}")
        return "\n".join(lines)


def _parse_row(row: dict) -> tuple[np.ndarray, str | None, str | None]:
    vals = np.full(6, np.nan)
    problem = None
    for i, name in enumerate(CHANNELS):
        cell = (row.get(name) or "").strip()
        if not cell:
            problem = problem or f"blank {name}"
            continue
        try:
            vals[i] = float(cell)
        except ValueError:
            problem = problem or f"unparseable {name}={cell!r}"
            continue
    flows = vals[list(FLOW_CHANNELS)]
    if np.any(flows[~np.isnan(flows)] < 0):
        problem = problem or "negative flow"
    sp = vals[SPEED]
    if not np.isnan(sp) and not 0.0 <= sp <= MAX_SPEED:
        problem = problem or f"speed {sp} outside [0, {MAX_SPEED:g}]"
    warning = None
    if not np.isnan(vals).any():
        band_sum = vals[list(BAND_CHANNELS)].sum()
        if abs(band_sum - vals[TOTAL]) > TOTAL_TOLERANCE:
            warning = f"total flow {vals[TOTAL]:g} != band sum {band_sum:g}"
    return vals, problem, warning


def ingest_csv(paths: Iterable) -> tuple[list[SiteDay], IngestLog]:
    """Parse daily report CSVs into per-site, per-day slot grids.

    Bad rows are masked and counted in the returned log rather than raised.
    """
    days: dict[tuple[str, dt.date], SiteDay] = {}
    report = IngestLog()
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [h for h in HEADER if h not in (reader.fieldnames or [])]
            if missing:
                raise DataError(f"{path}: missing columns {missing}")
            for line_no, row in enumerate(reader, start=2):
                report.rows += 1
                try:
                    ts = dt.datetime.fromisoformat(row["timestamp"].strip())
                except (ValueError, AttributeError):
                    report.invalid_rows.append((line_no, f"malformed timestamp {row.get('timestamp')!r}"))
                    continue
                if ts.weekday() >= 5:
                    report.weekend_rows += 1
                    continue
                slot = slot_of(ts)
                if slot is None:
                    report.midnight_rows += 1
                    continue
                site = row["site_id"].strip()
                key = (site, ts.date())
                sd = days.get(key)
                if sd is None:
                    sd = days[key] = SiteDay(site, ts.date())
                vals, problem, warning = _parse_row(row)
                if warning:
                    report.consistency_warnings.append((line_no, warning))
                if problem:
                    report.invalid_rows.append((line_no, problem))
                    sd.values[slot] = np.nan
                    sd.valid[slot] = False
                    continue
                sd.values[slot] = vals
                sd.valid[slot] = True
    return sorted(days.values(), key=lambda s: (s.site_id, s.date)), report


def write_csv(path, dataset: "CorridorDataset", include_midnight: bool = False) -> None:
    """Write a dataset back out in the ingestion CSV format (blank = missing)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for si, site in enumerate(dataset.sites):
            for di, day in enumerate(dataset.dates):
                if include_midnight:
                    for q in range(4):
                        ts = dt.datetime.combine(day, dt.time(0, 15 * q))
                        w.writerow([site, ts.isoformat()] + [""] * 6)
                for k in range(SLOTS):
                    ts = dt.datetime.combine(day, slot_time(k))
                    v = dataset.values[si, di, k]
                    w.writerow([site, ts.isoformat()] + ["" if np.isnan(x) else f"{x:g}" for x in v])


# ---------------------------------------------------------------- dataset

@dataclass
class CorridorDataset:
    sites: list[str]
    dates: list[dt.date]
    values: np.ndarray          # (sites, days, 92, 6), NaN where missing
    provenance: np.ndarray      # (sites, days, 92) int8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        S, D = len(self.sites), len(self.dates)
        if self.values.shape != (S, D, SLOTS, 6):
            raise DataError(f"values shape {self.values.shape} != {(S, D, SLOTS, 6)}")
        if self.provenance.shape != (S, D, SLOTS):
            raise DataError(f"provenance shape {self.provenance.shape} != {(S, D, SLOTS)}")

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values).any(axis=-1)

    def select_sites(self, idx: Sequence[int]) -> "CorridorDataset":
        idx = list(idx)
        return CorridorDataset([self.sites[i] for i in idx], list(self.dates), self.values[idx].copy(),
                               self.provenance[idx].copy(), dict(self.meta))

    def select_days(self, idx: Sequence[int]) -> "CorridorDataset":
        idx = list(idx)
        return CorridorDataset(list(self.sites), [self.dates[i] for i in idx], self.values[:, idx].copy(),
                               self.provenance[:, idx].copy(), dict(self.meta))

    def copy(self) -> "CorridorDataset":
        return CorridorDataset(list(self.sites), list(self.dates), self.values.copy(),
                               self.provenance.copy(), dict(self.meta))


def assemble(sitedays: Sequence[SiteDay], site_order: Sequence[str] | None = None) -> CorridorDataset:
    """Stack SiteDays into a corridor grid.

    ``site_order`` lists site ids from downstream to upstream; by default sites
    are taken in sorted id order.
    """
    sites = list(site_order) if site_order is not None else sorted({s.site_id for s in sitedays})
    dates = sorted({s.date for s in sitedays})
    si = {s: i for i, s in enumerate(sites)}
    di = {d: i for i, d in enumerate(dates)}
    values = np.full((len(sites), len(dates), SLOTS, 6), np.nan)
    for sd in sitedays:
        if sd.site_id not in si:
            continue
        v = sd.values.copy()
        v[~sd.valid] = np.nan
        values[si[sd.site_id], di[sd.date]] = v
    prov = np.where(np.isnan(values).any(axis=-1), MISSING, OBSERVED).astype(np.int8)
    return CorridorDataset(sites, dates, values, prov)


# ---------------------------------------------------------------- quality

@dataclass
class QAReport:
    months: list[tuple[str, int, int, int]]   # (label, weekdays, valid, expected)
    dropped_sites: list[tuple[str, float]]
    kept_sites: int

    @property
    def valid(self) -> int:
        return sum(m[2] for m in self.months)

    @property
    def expected(self) -> int:
        return sum(m[3] for m in self.months)

    @property
    def weekdays(self) -> int:
        return sum(m[1] for m in self.months)

    @property
    def missing_rate(self) -> float:
        return 1.0 - self.valid / self.expected if self.expected else 0.0

    def table(self) -> str:
        head = ("Calendar Month", "Number of weekdays", "Number of raw valid data records",
                "Total expected data records", "Missing data rate")
        rows = [(lab, str(n), str(v), str(e), f"{100 * (1 - v / e):.2f}%") for lab, n, v, e in self.months]
        rows.append(("Total", str(self.weekdays), str(self.valid), str(self.expected),
                     f"{100 * self.missing_rate:.2f}%"))
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(head)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*r) for r in rows]
        lines.append("")
        lines.append(f"sites kept: {self.kept_sites}; sites dropped: {len(self.dropped_sites)}")
        for site, frac in self.dropped_sites:
            lines.append(f"  dropped {site}: {100 * frac:.2f}% missing")
        return "\n".join(lines) + "\n"


def qa_report(dataset: CorridorDataset, dropped: Sequence[tuple[str, float]] = ()) -> QAReport:
    valid = dataset.valid
    by_month: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, d in enumerate(dataset.dates):
        by_month[(d.year, d.month)].append(i)
    months = []
    for (y, m), idx in sorted(by_month.items()):
        label = dt.date(y, m, 1).strftime("%b-%y")
        months.append((label, len(idx), int(valid[:, idx].sum()), len(dataset.sites) * len(idx) * SLOTS))
    return QAReport(months, list(dropped), len(dataset.sites))


def quality_filter(dataset: CorridorDataset, max_missing: float = 0.10) -> tuple[CorridorDataset, QAReport]:
    """Drop sites whose missing-slot fraction exceeds ``max_missing``."""
    valid = dataset.valid
    frac = 1.0 - valid.reshape(len(dataset.sites), -1).mean(axis=1)
    keep, dropped = [], []
    for i, site in enumerate(dataset.sites):
        if valid[i].sum() == 0 or frac[i] > max_missing:
            dropped.append((site, float(frac[i])))
        else:
            keep.append(i)
    if not keep:
        raise DataError(f"all {len(dataset.sites)} sites exceed the missing-data threshold {max_missing}")
    kept = dataset.select_sites(keep)
    return kept, qa_report(kept, dropped)


# ---------------------------------------------------------------- infill

@dataclass
class InfillLog:
    same_day: int = 0
    prev_week: int = 0
    warnings: list[str] = field(default_factory=list)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Start/stop of each run of True in a 1-D mask."""
    runs, start = [], None
    for k, m in enumerate(mask):
        if m and start is None:
            start = k
        elif not m and start is not None:
            runs.append((start, k))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def _fill_same_day(day: np.ndarray, a: int, b: int, policy: str) -> bool:
    before = a - 1 if a > 0 else None
    after = b if b < len(day) and not np.isnan(day[b]).any() else None
    if before is None and after is None:
        return False
    if policy == "interpolate" and before is not None and after is not None:
        w = (np.arange(a, b) - before) / (after - before)
        day[a:b] = day[before] + w[:, None] * (day[after] - day[before])
    else:
        day[a:b] = day[before] if before is not None else day[after]
    return True


def infill(dataset: CorridorDataset, policy: str = "carry_forward", max_short_gap: int = 3) -> tuple[CorridorDataset, InfillLog]:
    """Fill gaps per site and day.

    Gaps of up to ``max_short_gap`` slots take the most recent same-day value
    (or the next one at the start of a day); longer gaps copy the same slots
    from the same weekday one week earlier.  ``policy="interpolate"`` swaps
    carry-forward for linear interpolation on short gaps.
    """
    if policy not in ("carry_forward", "interpolate"):
        raise ValueError(f"unknown infill policy {policy!r}")
    out = dataset.copy()
    rec = InfillLog()
    day_index = {d: i for i, d in enumerate(out.dates)}
    order = sorted(range(len(out.dates)), key=lambda i: out.dates[i])
    for s in range(len(out.sites)):
        for d in order:
            day = out.values[s, d]
            prov = out.provenance[s, d]
            for a, b in _runs(np.isnan(day).any(axis=1)):
                if b - a <= max_short_gap:
                    if _fill_same_day(day, a, b, policy):
                        prov[a:b] = SAME_DAY
                        rec.same_day += b - a
                        continue
                donor = day_index.get(out.dates[d] - dt.timedelta(days=7))
                if donor is not None and not np.isnan(out.values[s, donor, a:b]).any():
                    day[a:b] = out.values[s, donor, a:b]
                    prov[a:b] = PREV_WEEK
                    rec.prev_week += b - a
                    continue
                msg = f"{out.sites[s]} {out.dates[d]} slots {a}-{b - 1}: no previous-week donor, same-day fill used"
                if _fill_same_day(day, a, b, "carry_forward"):
                    prov[a:b] = SAME_DAY
                    rec.same_day += b - a
                    rec.warnings.append(msg)
                    log.warning(msg)
                else:
                    raise DataError(f"{out.sites[s]} {out.dates[d]}: no data on the day and no previous-week donor")
    return out, rec


# ---------------------------------------------------------------- scaling

@dataclass
class Scaler:
    mean: np.ndarray        # five flow channels
    std: np.ndarray
    speed_divisor: float = SPEED_DIVISOR

    def transform(self, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=np.float64, copy=True)
        out[..., :5] = (out[..., :5] - self.mean) / self.std
        out[..., SPEED] = out[..., SPEED] / self.speed_divisor
        return out

    def inverse(self, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=np.float64, copy=True)
        out[..., :5] = out[..., :5] * self.std + self.mean
        out[..., SPEED] = out[..., SPEED] * self.speed_divisor
        return out

    def speed_to_mph(self, x):
        return np.asarray(x) * self.speed_divisor

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "speed_divisor": self.speed_divisor}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
                   float(d["speed_divisor"]))


def fit_scaler(train: CorridorDataset) -> Scaler:
    """Per-channel mean and standard deviation of the five flow channels."""
    flows = train.values[..., :5].reshape(-1, 5)
    flows = flows[~np.isnan(flows).any(axis=1)]
    if len(flows) == 0:
        raise DataError("no observations to fit the scaler")
    mean = flows.mean(axis=0)
    std = flows.std(axis=0)
    for i, s in enumerate(std):
        if not s > 0:
            raise DataError(f"channel {CHANNELS[i]} has zero variance in the training split")
    return Scaler(mean, std)


def apply_scaler(dataset: CorridorDataset, scaler: Scaler) -> CorridorDataset:
    out = dataset.copy()
    out.values = scaler.transform(dataset.values)
    out.meta["scaled"] = True
    return out


# ---------------------------------------------------------------- splits

@dataclass
class DaySplit:
    train: list[int]
    val: list[int]
    test: list[int]

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


def split_days(dates: Sequence[dt.date], n_val: int | None = None, n_test: int | None = None,
               seed: int = 0) -> DaySplit:
    """Hold out the last ``n_test`` days for test and ``n_val`` random days for validation.

    Validation days are drawn to cover distinct weekdays where possible,
    without taking the last remaining training day of any weekday.
    Defaults keep the 35/5/2 proportions of a 42-day corridor.
    """
    D = len(dates)
    if n_test is None:
        n_test = max(1, round(D * 2 / 42))
    if n_val is None:
        n_val = max(1, round(D * 5 / 42))
    if n_val + n_test >= D:
        raise DataError(f"{D} days cannot hold {n_val} validation and {n_test} test days plus training")
    order = sorted(range(D), key=lambda i: dates[i])
    test = order[D - n_test:] if n_test else []
    pool = order[:D - n_test]
    rng = np.random.default_rng(seed)
    shuffled = [pool[i] for i in rng.permutation(len(pool))]
    left = defaultdict(int)
    for i in pool:
        left[dates[i].weekday()] += 1
    val: list[int] = []
    seen: set[int] = set()
    # first pass: distinct weekdays, never taking the last training day of a weekday
    for i in shuffled:
        if len(val) == n_val:
            break
        wd = dates[i].weekday()
        if wd not in seen and left[wd] > 1:
            val.append(i)
            seen.add(wd)
            left[wd] -= 1
    for i in shuffled:
        if len(val) == n_val:
            break
        if i not in val and left[dates[i].weekday()] > 1:
            val.append(i)
            left[dates[i].weekday()] -= 1
    for i in shuffled:
        if len(val) == n_val:
            break
        if i not in val:
            val.append(i)
    val = sorted(val, key=lambda i: dates[i])
    train = [i for i in pool if i not in val]
    return DaySplit(train, val, sorted(test, key=lambda i: dates[i]))


# ---------------------------------------------------------------- markers and windows

def encode_marker(date: dt.date, slot: int) -> np.ndarray:
    """Weekday one-hot (Mon..Fri), linear time of day, and a 24 h sine/cosine pair."""
    wd = date.weekday()
    if wd >= 5:
        raise ValueError(f"{date} is a weekend day; only weekdays are modelled")
    if not 0 <= slot < SLOTS:
        raise ValueError(f"slot {slot} outside [0, {SLOTS})")
    out = np.zeros(MARKER_DIM)
    out[wd] = 1.0
    out[5] = slot / (SLOTS - 1)
    phase = 2 * np.pi * (slot + FIRST_MINUTE // SLOT_MINUTES) / 96
    out[6] = np.sin(phase)
    out[7] = np.cos(phase)
    return out


@dataclass
class Sample:
    space: np.ndarray       # (p, n, c)
    marker: np.ndarray      # (p, 8)
    target: np.ndarray      # (p, h)
    anchor: tuple[dt.date, int]

    @property
    def time(self) -> np.ndarray:
        return np.ascontiguousarray(np.swapaxes(self.space, 0, 1))


@dataclass
class SampleSet:
    space: np.ndarray       # (N, p, n, c)
    marker: np.ndarray      # (N, p, 8)
    target: np.ndarray      # (N, p, h)
    anchors: list[tuple[dt.date, int]]
    last_speed: np.ndarray  # (N, p) scaled speed at the final input slot
    target_prev_week: np.ndarray = None  # (N, p, h) bool
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.space)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.space[i], self.marker[i], self.target[i], self.anchors[i])

    @property
    def time(self) -> np.ndarray:
        return np.ascontiguousarray(np.swapaxes(self.space, 1, 2))

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.intp)
        return SampleSet(self.space[idx], self.marker[idx], self.target[idx],
                         [self.anchors[i] for i in idx], self.last_speed[idx],
                         None if self.target_prev_week is None else self.target_prev_week[idx], dict(self.meta))


def samples_per_day(window: int, horizon: int) -> int:
    return SLOTS - window - horizon + 1


def make_samples(dataset: CorridorDataset, days: Sequence[int] | None = None, window: int = 4,
                 horizon: int = 1, direct: bool = True, max_prev_week_fraction: float = 0.25) -> SampleSet:
    """Slide a ``window``-slot history over each day without crossing midnight.

    The target of a window ending at slot ``t-1`` is the speed at slots
    ``t .. t+horizon-1``; with ``direct`` only slot ``t+horizon-1`` is kept.
    The time marker encodes the final target slot.
    """
    if window < 2 or horizon < 1:
        raise DataError(f"need window >= 2 and horizon >= 1, got {window}, {horizon}")
    if window + horizon > SLOTS:
        raise DataError(f"window + horizon = {window + horizon} exceeds {SLOTS} slots")
    if np.isnan(dataset.values).any():
        raise DataError("dataset still has gaps; run infill first")
    days = list(range(len(dataset.dates))) if days is None else list(days)
    per_day = samples_per_day(window, horizon)
    p = len(dataset.sites)
    N = per_day * len(days)
    h_out = 1 if direct else horizon
    space = np.empty((N, p, window, 6))
    marker = np.empty((N, p, MARKER_DIM))
    target = np.empty((N, p, h_out))
    prevw = np.empty((N, p, h_out), dtype=bool)
    last = np.empty((N, p))
    anchors = []
    k = 0
    for d in days:
        day = dataset.values[:, d]           # (p, 92, 6)
        prov = dataset.provenance[:, d]
        date = dataset.dates[d]
        for s in range(per_day):
            t = s + window
            space[k] = day[:, s:t]
            marker[k] = encode_marker(date, t + horizon - 1)[None, :]
            tgt = slice(t + horizon - 1, t + horizon) if direct else slice(t, t + horizon)
            target[k] = day[:, tgt, SPEED]
            prevw[k] = prov[:, tgt] == PREV_WEEK
            last[k] = day[:, t - 1, SPEED]
            anchors.append((date, t))
            k += 1
    out = SampleSet(space, marker, target, anchors, last, prevw,
                    {"window": window, "horizon": horizon, "direct": direct})
    frac = float(prevw.mean()) if prevw.size else 0.0
    out.meta["target_prev_week_fraction"] = frac
    if frac > max_prev_week_fraction:
        log.warning("%.1f%% of target cells were copied from the previous week (limit %.0f%%)",
                    100 * frac, 100 * max_prev_week_fraction)
    return out


# ---------------------------------------------------------------- cache

def save_dataset(dataset: CorridorDataset, path) -> str:
    meta = dict(dataset.meta)
    meta.update({"sites": list(dataset.sites), "dates": [d.isoformat() for d in dataset.dates],
                 "channels": list(CHANNELS)})
    arrays = {"values": dataset.values, "provenance": dataset.provenance.astype(np.float64)}
    return container.write(path, "dataset", meta, arrays)


def load_dataset(path) -> CorridorDataset:
    meta, arrays = container.read(path, "dataset")
    sites = meta.pop("sites")
    dates = [dt.date.fromisoformat(d) for d in meta.pop("dates")]
    meta.pop("channels", None)
    return CorridorDataset(sites, dates, arrays["values"].copy(), arrays["provenance"].astype(np.int8), meta)
