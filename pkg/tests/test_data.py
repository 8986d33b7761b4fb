import csv
import datetime as dt

import numpy as np
import pytest

from dclstm import data as D
from dclstm.data import MISSING, OBSERVED, PREV_WEEK, SAME_DAY, SLOTS, SPEED
from dclstm.synth import _DAY_LEVEL, Event, SynthParams, synthesize_corridor

MON = dt.date(2017, 9, 4)


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(D.HEADER)
        w.writerows(rows)
    return path


def full_day(site, date, speed=60.0, bands=(100, 20, 10, 5)):
    rows = []
    for q in range(96):
        ts = dt.datetime.combine(date, dt.time(q // 4, 15 * (q % 4)))
        rows.append([site, ts.isoformat(), *bands, sum(bands), speed])
    return rows


def make_dataset(sites=3, days=10, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.uniform(10, 200, size=(sites, days, SLOTS, 6))
    values[..., SPEED] = rng.uniform(20, 75, size=(sites, days, SLOTS))
    prov = np.full((sites, days, SLOTS), OBSERVED, dtype=np.int8)
    return D.CorridorDataset([f"S{i}" for i in range(sites)], D.weekdays(MON, days), values, prov)


# ---------------------------------------------------------------- ingestion

def test_full_day_gives_92_valid_slots(tmp_path):
    days, rep = D.ingest_csv([write_rows(tmp_path / "a.csv", full_day("M1", MON))])
    assert len(days) == 1 and days[0].valid.sum() == 92
    assert rep.midnight_rows == 4 and not rep.invalid_rows and not rep.consistency_warnings


def test_blank_speed_masks_slot(tmp_path):
    rows = full_day("M1", MON)
    rows[10][-1] = ""
    days, rep = D.ingest_csv([write_rows(tmp_path / "a.csv", rows)])
    assert days[0].valid.sum() == 91
    assert not days[0].valid[6]   # row 10 is 02:30, slot 6
    assert len(rep.invalid_rows) == 1


def test_total_flow_consistency(tmp_path):
    ok = full_day("M1", MON, bands=(100, 20, 10, 5))
    bad = full_day("M2", MON)
    bad[20][6] = 200
    days, rep = D.ingest_csv([write_rows(tmp_path / "a.csv", ok + bad)])
    assert all(d.valid.sum() == 92 for d in days)
    assert len(rep.consistency_warnings) == 1
    assert "200" in rep.consistency_warnings[0][1]


def test_bad_rows_flagged_not_fatal(tmp_path):
    rows = full_day("M1", MON)
    rows[8][1] = "not-a-time"
    rows[9][2] = -4
    rows[11][7] = 130
    sat = full_day("M1", dt.date(2017, 9, 9))
    days, rep = D.ingest_csv([write_rows(tmp_path / "a.csv", rows + sat)])
    assert len(rep.invalid_rows) == 3
    assert rep.weekend_rows == 96
    assert days[0].valid.sum() == 89


def test_missing_column_is_fatal(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("site_id,timestamp\nM1,2017-09-04T01:00:00\n")
    with pytest.raises(D.DataError):
        D.ingest_csv([p])


def test_assemble_sorted_and_explicit_order(tmp_path):
    rows = full_day("B", MON) + full_day("A", MON) + full_day("A", dt.date(2017, 9, 5))
    days, _ = D.ingest_csv([write_rows(tmp_path / "a.csv", rows)])
    ds = D.assemble(days)
    assert ds.sites == ["A", "B"] and ds.values.shape == (2, 2, SLOTS, 6)
    assert ds.provenance[1, 1].tolist() == [MISSING] * SLOTS
    assert D.assemble(days, ["B", "A"]).sites == ["B", "A"]


def test_csv_roundtrip(tmp_path):
    ds = synthesize_corridor(1, sites=3, days=2)
    D.write_csv(tmp_path / "c.csv", ds, include_midnight=True)
    back = D.assemble(D.ingest_csv([tmp_path / "c.csv"])[0], ds.sites)
    assert np.allclose(back.values, ds.values)


# ---------------------------------------------------------------- quality

def table2_fixture():
    dates = D.weekdays(MON, 42)
    values = np.ones((60, 42, SLOTS, 6))
    sep = [i for i, d in enumerate(dates) if d.month == 9]
    octo = [i for i, d in enumerate(dates) if d.month == 10]
    flat = values.reshape(60, 42, SLOTS * 6)
    for idx, missing in ((sep, 110400 - 109363), (octo, 121440 - 117586)):
        cells = [(s, d, k) for d in idx for s in range(60) for k in range(SLOTS)]
        rng = np.random.default_rng(len(idx))
        for j in rng.choice(len(cells), size=missing, replace=False):
            s, d, k = cells[j]
            values[s, d, k, SPEED] = np.nan
    del flat
    prov = np.where(np.isnan(values).any(-1), MISSING, OBSERVED).astype(np.int8)
    return D.CorridorDataset([f"S{i:02d}" for i in range(60)], dates, values, prov)


def test_table2_fixture():
    rep = D.qa_report(table2_fixture())
    assert rep.months == [("Sep-17", 20, 109363, 110400), ("Oct-17", 22, 117586, 121440)]
    assert rep.expected == 231840 and rep.valid == 226949 and rep.weekdays == 42
    assert f"{100 * rep.missing_rate:.2f}%" == "2.11%"
    table = rep.table()
    assert "0.94%" in table and "3.17%" in table and "2.11%" in table


def test_quality_filter_drops_sparse_and_empty_sites():
    ds = make_dataset(4, 5)
    ds.values[1, :, :, SPEED] = np.nan                 # nothing valid
    ds.values[2, :, :20] = np.nan                      # 21.7% missing
    ds.values[3, 0, :5] = np.nan                       # ~1% missing
    kept, rep = D.quality_filter(ds, max_missing=0.10)
    assert kept.sites == ["S0", "S3"]
    assert [s for s, _ in rep.dropped_sites] == ["S1", "S2"]
    kept, _ = D.quality_filter(ds, max_missing=1.0)
    assert "S1" not in kept.sites                      # zero valid slots always dropped


def test_quality_filter_all_dropped_is_fatal():
    ds = make_dataset(2, 2)
    ds.values[..., SPEED] = np.nan
    with pytest.raises(D.DataError):
        D.quality_filter(ds)


# ---------------------------------------------------------------- infill

def test_single_gap_carries_forward():
    ds = make_dataset(1, 1)
    ds.values[0, 0, 10, SPEED], ds.values[0, 0, 12, SPEED] = 55.0, 60.0
    ds.values[0, 0, 11] = np.nan
    out, rec = D.infill(ds)
    assert out.values[0, 0, 11, SPEED] == 55.0
    assert out.provenance[0, 0, 11] == SAME_DAY and rec.same_day == 1


def test_interpolate_policy():
    ds = make_dataset(1, 1)
    ds.values[0, 0, 10, SPEED], ds.values[0, 0, 12, SPEED] = 55.0, 60.0
    ds.values[0, 0, 11] = np.nan
    out, _ = D.infill(ds, policy="interpolate")
    assert out.values[0, 0, 11, SPEED] == 57.5


def test_long_gap_copies_previous_week():
    ds = make_dataset(1, 10)
    ds.values[0, 6, 30:35] = np.nan                    # Tuesday of week 2
    out, rec = D.infill(ds)
    assert np.array_equal(out.values[0, 6, 30:35], ds.values[0, 1, 30:35])
    assert (out.provenance[0, 6, 30:35] == PREV_WEEK).all() and rec.prev_week == 5


def test_long_gap_without_donor_falls_back_with_warning():
    ds = make_dataset(1, 2)
    ds.values[0, 0, 30:35] = np.nan
    out, rec = D.infill(ds)
    assert np.all(out.values[0, 0, 30:35] == ds.values[0, 0, 29])
    assert len(rec.warnings) == 1


def test_gap_at_day_start_takes_next_value():
    ds = make_dataset(1, 1)
    ds.values[0, 0, :2] = np.nan
    out, _ = D.infill(ds)
    assert np.all(out.values[0, 0, :2] == ds.values[0, 0, 2])


def test_no_gaps_unchanged():
    ds = make_dataset(2, 3)
    out, rec = D.infill(ds)
    assert np.array_equal(out.values, ds.values) and rec.same_day == rec.prev_week == 0
    assert (out.provenance == OBSERVED).all()


# ---------------------------------------------------------------- scaling

def test_scaler_contracts():
    ds = make_dataset(3, 6)
    train = ds.select_days(range(4))
    sc = D.fit_scaler(train)
    flows = D.apply_scaler(train, sc).values[..., :5].reshape(-1, 5)
    assert np.all(np.abs(flows.mean(0)) < 1e-9)
    assert np.all(np.abs(flows.std(0) - 1) < 1e-9)
    assert sc.transform(np.array([0, 0, 0, 0, 0, 70.0]))[SPEED] == 0.70
    assert np.max(np.abs(sc.inverse(sc.transform(ds.values)) - ds.values)) < 1e-9


def test_scaler_has_no_validation_leakage():
    ds = make_dataset(3, 6)
    a = D.fit_scaler(ds.select_days(range(4)))
    ds.values[:, 4:] *= 7.0
    b = D.fit_scaler(ds.select_days(range(4)))
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)


def test_zero_variance_channel_named():
    ds = make_dataset(2, 2)
    ds.values[..., 2] = 5.0
    with pytest.raises(D.DataError, match="flow_66_116"):
        D.fit_scaler(ds)


def test_scaler_dict_roundtrip():
    sc = D.fit_scaler(make_dataset(2, 2))
    back = D.Scaler.from_dict(sc.to_dict())
    assert np.array_equal(back.mean, sc.mean) and np.array_equal(back.std, sc.std)


# ---------------------------------------------------------------- windows

@pytest.mark.parametrize("window,horizon,count", [(4, 1, 88), (4, 6, 83), (12, 1, 80)])
def test_samples_per_day(window, horizon, count):
    assert D.samples_per_day(window, horizon) == count
    assert len(D.make_samples(make_dataset(2, 3), window=window, horizon=horizon)) == 3 * count


def test_canonical_split_tensor_shapes():
    ds = make_dataset(60, 42)
    split = D.split_days(ds.dates, 5, 2)
    shapes = [D.make_samples(ds, idx).space.shape for idx in (split.train, split.val, split.test)]
    assert shapes == [(3080, 60, 4, 6), (440, 60, 4, 6), (176, 60, 4, 6)]


def test_sample_alignment():
    ds = make_dataset(3, 2)
    s = D.make_samples(ds, window=4, horizon=3)
    i = 88 - 2 + 5          # day 1, window ending at slot 8
    date, t = s.anchors[i]
    assert date == ds.dates[1] and t == 9
    assert np.array_equal(s.space[i], ds.values[:, 1, 5:9])
    assert np.array_equal(s.target[i, :, 0], ds.values[:, 1, 11, SPEED])
    assert np.array_equal(s.marker[i, 0], D.encode_marker(date, 11))
    assert np.array_equal(s.time[i], np.swapaxes(s.space[i], 0, 1))
    assert np.array_equal(s[i].time, s.time[i])
    full = D.make_samples(ds, window=4, horizon=3, direct=False)
    assert np.array_equal(full.target[i], ds.values[:, 1, 9:12, SPEED])


def test_window_errors():
    ds = make_dataset(1, 1)
    with pytest.raises(D.DataError):
        D.make_samples(ds, window=1)
    with pytest.raises(D.DataError):
        D.make_samples(ds, window=90, horizon=3)
    ds.values[0, 0, 5] = np.nan
    with pytest.raises(D.DataError):
        D.make_samples(ds)


def test_prev_week_target_fraction_reported(caplog):
    ds = make_dataset(1, 6)
    ds.provenance[0, 5] = PREV_WEEK
    s = D.make_samples(ds)
    assert s.meta["target_prev_week_fraction"] == pytest.approx(1 / 6)
    assert not caplog.records
    s = D.make_samples(ds, days=[5])
    assert s.meta["target_prev_week_fraction"] == 1.0


# ---------------------------------------------------------------- markers

def test_marker_monday_first_slot():
    m = D.encode_marker(MON, 0)
    exp = [1, 0, 0, 0, 0, 0, np.sin(2 * np.pi * 4 / 96), np.cos(2 * np.pi * 4 / 96)]
    assert np.allclose(m, exp, atol=0, rtol=0) or np.array_equal(m, exp)


def test_marker_friday_last_slot():
    m = D.encode_marker(dt.date(2017, 9, 8), 91)
    assert m[:5].tolist() == [0, 0, 0, 0, 1] and m[5] == 1.0


def test_marker_unit_circle_and_weekend():
    for k in range(SLOTS):
        m = D.encode_marker(MON, k)
        assert abs(m[6] ** 2 + m[7] ** 2 - 1) < 1e-15
    with pytest.raises(ValueError):
        D.encode_marker(dt.date(2017, 9, 9), 0)
    with pytest.raises(ValueError):
        D.encode_marker(MON, 92)


# ---------------------------------------------------------------- splits

def test_split_defaults_and_disjoint():
    dates = D.weekdays(MON, 42)
    s = D.split_days(dates)
    assert (len(s.train), len(s.val), len(s.test)) == (35, 5, 2)
    assert s.test == [40, 41]
    assert not set(s.train) & set(s.val)
    assert sorted(s.train + s.val + s.test) == list(range(42))
    assert len({dates[i].weekday() for i in s.val}) == 5


def test_split_keeps_every_weekday_in_training():
    dates = D.weekdays(MON, 10)
    for seed in range(20):
        s = D.split_days(dates, 2, 1, seed=seed)
        assert {dates[i].weekday() for i in s.train} == set(range(5))


def test_split_too_small():
    with pytest.raises(D.DataError):
        D.split_days(D.weekdays(MON, 3), 2, 1)


# ---------------------------------------------------------------- synthetic corridors

def test_synth_deterministic(tmp_path):
    a = synthesize_corridor(3, sites=5, days=3)
    b = synthesize_corridor(3, sites=5, days=3)
    D.save_dataset(a, tmp_path / "a.dcl")
    D.save_dataset(b, tmp_path / "b.dcl")
    assert (tmp_path / "a.dcl").read_bytes() == (tmp_path / "b.dcl").read_bytes()
    assert not np.array_equal(a.values, synthesize_corridor(4, sites=5, days=3).values)


def test_synth_invariants():
    ds = synthesize_corridor(0, sites=8, days=5)
    v = ds.values
    assert np.all(np.abs(v[..., :4].sum(-1) - v[..., 4]) <= D.TOTAL_TOLERANCE)
    assert np.all(v[..., :5] >= 0) and np.all((v[..., SPEED] >= 0) & (v[..., SPEED] <= 120))


def test_synth_off_peak_near_free_flow():
    p = SynthParams(incident_rate=0.0)
    ds = synthesize_corridor(5, sites=20, days=5, params=p)
    off = ds.values[:, :, 2:10, SPEED]          # 01:30-03:30
    sigma = p.speed_noise_sd
    level = np.array([p.day_level * _DAY_LEVEL[d.weekday()] for d in ds.dates])
    outside = np.abs(off - p.free_speed - level[None, :, None]) > 3 * sigma + 0.2
    assert outside.mean() < 0.01


def test_synth_event_propagates_upstream():
    ev = Event(day=0, site=10, slot=44, depth=40.0, duration=4, reach=6)
    p = SynthParams(incident_rate=0.0, events=(ev,), noise_sd=0.5, ar_sd=0.2)
    ds = synthesize_corridor(2, sites=30, days=1, params=p)
    argmins = [int(np.argmin(ds.values[10 + j, 0, :, SPEED])) for j in range(ev.reach + 1)]
    assert all(a >= ev.slot for a in argmins)
    midday = ds.values[10:10 + ev.reach + 1, 0, 40:, SPEED]      # clear of the AM peak
    onsets = [int(np.argmax(row < row[:4].mean() - 10)) for row in midday]
    assert onsets == sorted(onsets) and onsets[-1] > onsets[0]


def test_synth_missing_rate():
    ds = synthesize_corridor(0, sites=6, days=4, params=SynthParams(missing_rate=0.05))
    assert (~ds.valid).sum() >= round(0.05 * ds.valid.size)
    assert 1 - ds.valid.mean() < 0.06
    out, _ = D.infill(ds)
    assert not np.isnan(out.values).any()


def test_dataset_cache_roundtrip(tmp_path):
    ds = synthesize_corridor(0, sites=3, days=2, params=SynthParams(missing_rate=0.02))
    D.save_dataset(ds, tmp_path / "d.dcl")
    back = D.load_dataset(tmp_path / "d.dcl")
    assert back.sites == ds.sites and back.dates == ds.dates
    assert np.array_equal(back.values, ds.values, equal_nan=True)
    assert np.array_equal(back.provenance, ds.provenance)
