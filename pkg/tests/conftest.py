import re

import numpy as np
import pytest

from dclstm import data as D
from dclstm.model import ModelSpec, build
from dclstm.synth import synthesize_corridor

TOY = dict(sites=6, window=4, filters=(4, 4, 8), space_units=5, time_units=6)


def tiny_corpus(seed=0, sites=6, days=4, window=4, horizon=1):
    raw, _ = D.infill(synthesize_corridor(seed, sites=sites, days=days))
    split = D.split_days(raw.dates, 1, 1, seed=0)
    scaler = D.fit_scaler(raw.select_days(split.train))
    scaled = D.apply_scaler(raw, scaler)
    make = lambda idx: D.make_samples(scaled, idx, window, horizon)  # noqa: E731
    return raw, scaler, make(split.train), make(split.val), make(split.test)


@pytest.fixture(scope="session")
def tiny():
    return tiny_corpus()


def toy_model(seed=0, variant="DCLSTMt", **kw):
    return build(ModelSpec(variant, **{**TOY, **kw}), seed)


def warmed(model, samples, n=4):
    model.forward(samples.space[:n], samples.marker[:n], training=True)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    """Log a PASS/FAIL line for acceptance criterion ``n`` and fail the test if needed."""
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if m and report.failed and int(m.group(1)) not in ACCEPTANCE:
        n = int(m.group(1))
        ACCEPTANCE[n] = f"criterion {n:2d}: FAIL  error during {report.when}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
