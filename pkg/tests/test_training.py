import dataclasses

import numpy as np
import pytest

from conftest import toy_model, warmed
from dclstm import tensor as T
from dclstm import training as tr
from dclstm.tensor import Node


# ---------------------------------------------------------------- loss

def test_loss_perfect_prediction_is_zero():
    y = np.full((2, 3, 1), 0.6)
    assert float(tr.loss(Node(y.copy()), y).value) == 0.0


def test_loss_constant_residual():
    y = np.zeros((2, 3, 1))
    assert float(tr.loss(Node(y + 0.1), y).value) == pytest.approx(0.01, abs=1e-15)


def test_loss_l2_on_final_weights(tiny):
    model = toy_model()
    d1 = model.layers["d_1"].params
    d1["kernel"].value[...] = 0.0
    d1["kernel"].value.reshape(-1)[:2] = [1.0, -1.0]
    y = np.zeros((1, 6, 1))
    assert float(tr.loss(Node(y), y, model, l2=0.0002).value) == pytest.approx(0.0004, abs=1e-18)


def test_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        tr.loss(Node(np.zeros((2, 3))), np.zeros((3, 2)))


# ---------------------------------------------------------------- Adam

def test_adam_constant_gradient_step_tends_to_lr():
    p = [np.zeros(3)]
    st = tr.AdamState.zeros_like(p)
    steps = []
    for _ in range(2000):
        before = p[0].copy()
        tr.adam_step(p, [np.array([0.5, -2.0, 7.0])], st, 0.01)
        steps.append(np.abs(p[0] - before))
    assert np.allclose(steps[-1], 0.01, rtol=1e-6)
    assert np.allclose(steps[0], 0.01, rtol=1e-6)   # bias correction makes the first step full size


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    st = tr.AdamState.zeros_like(p)
    tr.adam_step(p, [np.zeros(2)], st, 0.1)
    assert p[0].tolist() == [1.0, -2.0]


def test_adam_quadratic_decreases():
    w = [np.array([1.0])]
    st = tr.AdamState.zeros_like(w)
    mags = [1.0]
    for _ in range(10):
        tr.adam_step(w, [2 * w[0]], st, 0.1)
        mags.append(abs(float(w[0][0])))
    assert all(b < a for a, b in zip(mags, mags[1:]))


def test_adam_matches_hand_formula():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(3)]
    p = [p0.copy()]
    st = tr.AdamState.zeros_like(p)
    m = v = np.zeros(4)
    ref = p0.copy()
    for t, g in enumerate(grads, start=1):
        tr.adam_step(p, [g], st, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p[0], ref, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_small_step_reduces_loss(seed, tiny):
    _, _, train, _, _ = tiny
    model = warmed(toy_model(seed), train)
    i = np.random.default_rng(seed).integers(len(train), size=1)

    def f():
        return tr.loss(model.forward(train.space[i], train.marker[i], training=True), train.target[i])

    before = float(f().value)
    opt = tr.Adam(model.parameters(), lr=1e-7)
    T.backward(f())
    opt.step()
    assert float(f().value) < before


# ---------------------------------------------------------------- evaluation

def test_evaluate_examples():
    y = np.random.default_rng(0).uniform(0.3, 0.7, size=(5, 4, 1))
    assert (tr.report_from_predictions(y, y).mse, tr.report_from_predictions(y, y).mae) == (0.0, 0.0)
    rep = tr.report_from_predictions(y - 0.02, y)
    assert rep.mse == pytest.approx(0.0004, abs=1e-15) and rep.mae == pytest.approx(0.02, abs=1e-15)
    assert rep.mae_mph == pytest.approx(2.0) and rep.n_predictions == 20


def test_evaluate_brute_force_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=3))
        y = rng.uniform(0, 1, size=shape)
        p = y + rng.normal(0, 0.03, size=shape)
        rep = tr.report_from_predictions(p, y)
        sq = ab = 0.0
        n = 0
        for idx in np.ndindex(shape):
            r = y[idx] - p[idx]
            sq += r * r
            ab += abs(r)
            n += 1
        assert abs(rep.mse - sq / n) <= 1e-12 and abs(rep.mae - ab / n) <= 1e-12
        assert rep.mae <= np.sqrt(rep.mse) + 1e-15


def test_evaluate_empty_rejected(tiny):
    _, _, train, _, _ = tiny
    with pytest.raises(ValueError):
        tr.evaluate(warmed(toy_model(), train), train.subset([]))


def test_evaluate_model_matches_predict(tiny):
    _, _, train, val, _ = tiny
    model = warmed(toy_model(), train)
    rep = tr.evaluate(model, val)
    pred = model.predict(val.space, val.marker)
    assert rep.mse == float(np.mean((val.target - pred) ** 2))


# ---------------------------------------------------------------- fit

def small_fit(tiny, seed=0, **kw):
    _, _, train, val, _ = tiny
    model = toy_model(seed)
    cfg = tr.TrainConfig(**{"max_epochs": 2, "seed": seed, "batch_size": 8, **kw})
    return model, tr.fit(model, train.subset(range(40)), val.subset(range(20)), cfg)


def test_fit_deterministic(tiny):
    m1, r1 = small_fit(tiny)
    m2, r2 = small_fit(tiny)
    assert [dataclasses.astuple(h) for h in r1.history] == [dataclasses.astuple(h) for h in r2.history]
    s1, s2 = m1.state_arrays(), m2.state_arrays()
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)


def test_fit_restores_best_epoch(tiny):
    _, _, _, val, _ = tiny
    model, res = small_fit(tiny, max_epochs=4)
    best = min(h.val_mse for h in res.history)
    assert res.best.val_mse == best
    assert tr.evaluate(model, val.subset(range(20))).mse == best
    assert model.meta["epoch"] == res.best_epoch


def test_early_stopping_patience(tiny, monkeypatch):
    _, _, train, val, _ = tiny
    seq = iter([0.5, 0.4, 0.45, 0.46, 0.47, 0.48, 0.49, 0.3])
    real = tr.evaluate

    def fake(model, samples, batch_size=64):
        rep = real(model, samples, batch_size)
        return dataclasses.replace(rep, mse=next(seq))

    monkeypatch.setattr(tr, "evaluate", fake)
    res = tr.fit(toy_model(), train.subset(range(8)), val.subset(range(4)),
                 tr.TrainConfig(max_epochs=10, patience=5, batch_size=8))
    assert len(res.history) == 7 and res.best_epoch == 2


def test_full_run_when_always_improving(tiny, monkeypatch):
    _, _, train, val, _ = tiny
    seq = iter(np.linspace(1.0, 0.1, 50))
    real = tr.evaluate
    monkeypatch.setattr(tr, "evaluate", lambda m, s, batch_size=64: dataclasses.replace(real(m, s), mse=next(seq)))
    res = tr.fit(toy_model(), train.subset(range(4)), val.subset(range(2)),
                 tr.TrainConfig(max_epochs=50, patience=5, batch_size=4))
    assert len(res.history) == 50 and res.best_epoch == 50


def test_non_finite_loss_aborts(tiny):
    _, _, train, val, _ = tiny
    bad = train.subset(range(8))
    bad.target = bad.target.copy()
    bad.target[0] = np.nan
    with pytest.raises(tr.NumericError, match="epoch 1"):
        tr.fit(toy_model(), bad, val.subset(range(4)), tr.TrainConfig(max_epochs=1, shuffle=False, batch_size=8))


def test_partial_final_batch_kept(tiny, monkeypatch):
    _, _, train, val, _ = tiny
    sizes = []
    real = tr.loss
    monkeypatch.setattr(tr, "loss", lambda p, t, m=None, l2=0.0: sizes.append(len(t)) or real(p, t, m, l2))
    tr.fit(toy_model(), train.subset(range(10)), val.subset(range(2)), tr.TrainConfig(max_epochs=1, batch_size=4))
    assert sizes == [4, 4, 2]


def test_config_validation():
    for bad in ({"learning_rate": -1}, {"batch_size": 0}, {"patience": 0}):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


def test_epoch_log(tmp_path):
    hist = [tr.EpochRecord(1, 0.5, 0.25, 0.1), tr.EpochRecord(2, 0.4, 0.2, 0.09)]
    tr.write_epoch_log(tmp_path / "log.csv", hist, header="parameters 570275")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "# parameters 570275"
    assert lines[1] == "epoch,train_loss,val_mse,val_mae"
    assert lines[2] == "1,0.5,0.25,0.1"


# ---------------------------------------------------------------- grid search

def grid_data(tiny):
    _, _, train, val, _ = tiny
    return train.subset(range(24)), val.subset(range(12))


def test_grid_single_point(tiny):
    train, val = grid_data(tiny)
    best, rows = tr.grid_search(toy_model, train, val, batch_sizes=(8,), epochs=1)
    assert len(rows) == 1
    assert (best.learning_rate, best.l2, best.batch_size) == (0.003, 0.0002, 8)


def test_grid_contains_reference_point_and_lr_zero_loses(tiny):
    train, val = grid_data(tiny)
    best, rows = tr.grid_search(toy_model, train, val, learning_rates=(0.0, 0.003), l2s=(0.0002,),
                                batch_sizes=(4,), epochs=2)
    assert any((r.learning_rate, r.l2, r.batch_size) == (0.003, 0.0002, 4) for r in rows)
    assert best.learning_rate != 0.0
    assert rows == sorted(rows, key=lambda r: r.val_mse)


def test_grid_empty_rejected(tiny):
    train, val = grid_data(tiny)
    with pytest.raises(ValueError):
        tr.grid_search(toy_model, train, val, learning_rates=())
