import datetime as dt

import numpy as np
import pytest

from conftest import toy_model, warmed
from dclstm import scenario as S
from dclstm.data import SPEED, TOTAL, Sample, encode_marker
from dclstm.experiment import raw_sample


def sample(p=12, n=4, seed=0):
    rng = np.random.default_rng(seed)
    space = rng.uniform(10, 100, size=(p, n, 6)).round()
    space[..., TOTAL] = space[..., :4].sum(-1)
    space[..., SPEED] = rng.uniform(40, 70, size=(p, n))
    marker = np.repeat(encode_marker(dt.date(2017, 9, 5), 32)[None], p, 0)
    return Sample(space, marker, rng.uniform(40, 70, size=(p, 1)), (dt.date(2017, 9, 5), 32))


def test_inject_changes_only_named_cells():
    s = sample()
    out = S.inject(s, S.IncidentSpec((8, 9), (3, 4)))
    changed = np.argwhere(out.space != s.space)
    assert {(int(a), int(b)) for a, b, _ in changed} <= {(8, 3), (9, 3)}
    assert out.space[8, 3, TOTAL] == 220 and out.space[9, 3, SPEED] == 5.0
    mask = np.ones(s.space.shape, bool)
    mask[[8, 9], 3] = False
    assert np.array_equal(out.space[mask], s.space[mask])
    assert np.array_equal(out.marker, s.marker)


def test_inject_band_shares():
    s = sample()
    s.space[2, 1, :4] = [50, 30, 15, 5]
    out = S.inject(s, S.IncidentSpec((2,), (1, 2)))
    assert out.space[2, 1, :4].tolist() == [110, 66, 33, 11]


def test_inject_zero_total_goes_to_first_band():
    s = sample()
    s.space[0, 0, :5] = 0
    out = S.inject(s, S.IncidentSpec((0,), (0, 1), flow=40))
    assert out.space[0, 0, :5].tolist() == [40, 0, 0, 0, 40]


def test_inject_noop_is_identity():
    s = sample()
    cell = s.space[4, 2]
    out = S.inject(s, S.IncidentSpec((4,), (2, 3), flow=float(cell[TOTAL]), speed=float(cell[SPEED])))
    assert np.array_equal(out.space, s.space)


def test_inject_rescales_with_existing_scaler(tiny):
    _, scaler, *_ = tiny
    s = sample(6)
    out = S.inject(s, S.IncidentSpec((1,), (3, 4)), scaler)
    raw_out = S.inject(s, S.IncidentSpec((1,), (3, 4)))
    assert np.allclose(out.space, scaler.transform(raw_out.space), rtol=0, atol=1e-15)


def test_inject_validation():
    s = sample(p=6)
    with pytest.raises(ValueError):
        S.inject(s, S.IncidentSpec((1,), (3, 5)))
    with pytest.raises(ValueError):
        S.inject(s, S.IncidentSpec((6,), (0, 1)))
    with pytest.raises(ValueError):
        S.IncidentSpec((1,), (2, 2))


def trained(tiny):
    _, _, train, _, _ = tiny
    return warmed(toy_model(), train)


def test_assess_noop_gives_zero_report(tiny):
    raw, scaler, *_ = tiny
    rs = raw_sample(raw, 0, 30, 4, 1)
    cell = rs.space[3, 3]
    rep = S.assess(trained(tiny), rs, S.IncidentSpec((3,), (3, 4), float(cell[TOTAL]), float(cell[SPEED])), scaler)
    assert np.all(rep.delta == 0) and rep.extent == 0


def test_assess_rejects_untrained(tiny):
    raw, scaler, *_ = tiny
    with pytest.raises(RuntimeError):
        S.assess(toy_model(), raw_sample(raw, 0, 30, 4, 1), S.IncidentSpec((1,), (3, 4)), scaler)


def test_assess_extent_and_speed(tiny, monkeypatch):
    raw, scaler, *_ = tiny
    model = trained(tiny)
    base = np.full((1, 6, 1), 0.60)
    hit = base.copy()
    hit[0, :, 0] -= np.array([0.0, 0.20, 0.08, 0.06, 0.01, 0.09])   # mph deltas 0,-20,-8,-6,-1,-9
    outs = iter([base, hit])
    monkeypatch.setattr(model, "predict", lambda *a, **k: next(outs))
    rep = S.assess(model, raw_sample(raw, 0, 30, 4, 1), S.IncidentSpec((1,), (3, 4)), scaler)
    assert rep.extent == 2                     # sites 2 and 3; site 4 breaks the run
    assert rep.extent_km == 1.0 and rep.propagation_kmh == 4.0
    assert rep.upstream_mean_delta(5) == pytest.approx(np.mean([-8, -6, -1, -9]))


def test_report_antisymmetric():
    a = S.ImpactReport(np.array([60.0, 50.0]), np.array([55.0, 52.0]), None, (0,), 0, 0.5, 15.0, 5.0)
    b = S.ImpactReport(a.incident, a.baseline, None, (0,), 0, 0.5, 15.0, 5.0)
    assert np.array_equal(a.delta, -b.delta)


def test_report_csv(tmp_path):
    rep = S.ImpactReport(np.array([60.0, 50.0]), np.array([55.0, 52.0]), np.array([58.0, 49.0]), (0,), 0, 0.5, 15.0, 5.0)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "site,observed_mph,baseline_mph,incident_mph,delta_mph,incident_site"
    assert lines[1] == "0,58.0,60.0,55.0,-5.0,1"


def test_read_scenario(tmp_path):
    f = tmp_path / "s.txt"
    f.write_text("# slots default to the last one\nsites = 8, 9\nflow = 220\nspeed = 5\ndate = 2017-10-30\n")
    spec, rest = S.read_scenario(f, window=4)
    assert spec == S.IncidentSpec((8, 9), (3, 4), 220.0, 5.0)
    assert rest == {"date": "2017-10-30"}
    f.write_text("sites = 2\nslots = 1,3\n")
    assert S.read_scenario(f)[0].slots == (1, 3)
    f.write_text("sites = 2\n")
    with pytest.raises(ValueError):
        S.read_scenario(f)
    f.write_text("nonsense\n")
    with pytest.raises(ValueError):
        S.read_scenario(f, 4)
