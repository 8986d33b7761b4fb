"""Command line front end.

Every command writes into a fresh run directory (``--out-dir``) and leaves a
``manifest.json`` there listing the resolved configuration, input digests and
the SHA-256 of every artifact.  Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dclstm")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys use flag names."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip().lstrip("-").replace("-", "_")] = v.strip()
    return out


def set_threads(n: int | None) -> None:
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


# ---------------------------------------------------------------- run directory

class Run:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.t0 = time.perf_counter()
        if args.out_dir:
            self.dir = Path(args.out_dir)
        else:
            stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
            self.dir = Path("runs") / f"{command}-{stamp}"
        if self.dir.exists() and any(self.dir.iterdir()):
            raise UsageError(f"run directory {self.dir} is not empty; pick a fresh --out-dir")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.summary: dict = {}

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def add_input(self, path) -> None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"input {path} not found")
        self.inputs[str(path)] = sha256_file(path)

    def finish(self) -> Path:
        config = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func",)}
        manifest = {
            "command": self.command,
            "config": json.loads(json.dumps(config, default=str)),
            "seed": self.args.seed,
            "inputs": self.inputs,
            "outputs": {name: sha256_file(self.dir / name) for name in sorted(set(self.outputs))
                        if (self.dir / name).exists()},
            "summary": self.summary,
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        from . import __version__
        manifest["version"] = __version__
        out = self.dir / "manifest.json"
        out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out


# ---------------------------------------------------------------- shared helpers

def _load_data(run: Run, path):
    from .data import load_dataset

    run.add_input(path)
    return load_dataset(path)


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(learning_rate=args.lr, l2=args.l2, batch_size=args.batch_size, max_epochs=args.epochs,
                       patience=args.patience, seed=args.seed)


def _scale(args) -> dict:
    from .experiment import scale_kwargs

    return scale_kwargs(args.filters, args.space_units)


def _prepare(args, dataset, window=None, horizon=None):
    from .experiment import prepare

    return prepare(dataset, window or args.window, horizon or args.horizon, args.val_days, args.test_days,
                   args.split_seed, args.infill_policy)


def _overrides(run, args):
    if not getattr(args, "sfc_overrides", None):
        return None
    from .baselines import load_site_overrides

    run.add_input(args.sfc_overrides)
    return load_site_overrides(args.sfc_overrides)


def _fmt(v):
    return "" if v is None else repr(float(v))


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_synth(args, run: Run) -> int:
    from .data import qa_report, save_dataset
    from .synth import SynthParams, synthesize_corridor

    kw = {}
    if args.no_day_modifiers:
        kw["day_modifiers"] = False
    if args.queue_speed is not None:
        kw["queue_speed_kmh"] = args.queue_speed
    if args.missing_rate:
        kw["missing_rate"] = args.missing_rate
    if args.incident_rate is not None:
        kw["incident_rate"] = args.incident_rate
    ds = synthesize_corridor(args.seed, args.sites, args.days, SynthParams(**kw))
    save_dataset(ds, run.path("dataset.dcl"))
    qa = qa_report(ds)
    run.path("qa_report.txt").write_text(qa.table() + "\n")
    if args.csv:
        from .data import write_csv

        write_csv(run.path("corridor.csv"), ds)
    run.summary = {"sites": len(ds.sites), "days": len(ds.dates), "expected_records": qa.expected,
                   "valid_records": qa.valid}
    print(qa.table())
    return EXIT_OK


def cmd_ingest(args, run: Run) -> int:
    from .data import assemble, ingest_csv, quality_filter, save_dataset

    for p in args.csv:
        run.add_input(p)
    order = None
    if args.site_order:
        run.add_input(args.site_order)
        order = [l.strip() for l in Path(args.site_order).read_text().splitlines() if l.strip()]
    sitedays, ingest_log = ingest_csv(args.csv)
    ds = assemble(sitedays, order)
    kept, qa = quality_filter(ds, args.max_missing)
    save_dataset(kept, run.path("dataset.dcl"))
    text = qa.table() + "\n\n" + ingest_log.summary() + "\n"
    run.path("qa_report.txt").write_text(text)
    run.summary = {"rows": ingest_log.rows, "invalid_rows": len(ingest_log.invalid_rows),
                   "consistency_warnings": len(ingest_log.consistency_warnings),
                   "kept_sites": qa.kept_sites, "dropped_sites": [s for s, _ in qa.dropped_sites]}
    print(text, end="")
    return EXIT_OK


def _log_header(model, args, prep) -> str:
    return "\n".join([
        f"variant {model.spec.variant}",
        f"parameters {model.param_total()}",
        f"sites {model.spec.sites} window {model.spec.window} horizon {model.spec.horizon}",
        f"train_samples {len(prep.train)} val_samples {len(prep.val)}",
        f"samples_per_day {len(prep.train) // max(len(prep.split.train), 1)}",
    ])


def cmd_train(args, run: Run) -> int:
    from .experiment import model_spec
    from .model import build, save_checkpoint
    from .training import evaluate, fit, write_epoch_log

    ds = _load_data(run, args.data)
    prep = _prepare(args, ds)
    spec = model_spec(args.variant, len(ds.sites), args.window, args.horizon, bn_before_activation=args.bn_before_activation,
                      raw_reshape=args.raw_reshape, **_scale(args))
    model = build(spec, args.seed)
    header = _log_header(model, args, prep)
    print(header)
    result = fit(model, prep.train, prep.val, _train_config(args),
                 on_epoch=lambda r: print(f"epoch {r.epoch} train_loss {r.train_loss:.6g} val_mse {r.val_mse:.6g} "
                                          f"val_mae {r.val_mae:.6g}", flush=True))
    write_epoch_log(run.path("epoch_log.csv"), result.history, header)
    _write_csv(run.path("epoch_times.csv"), ["epoch", "wall_time_s"],
               [(i + 1, f"{t:.3f}") for i, t in enumerate(result.wall_times)])
    extra = {"split": prep.split.to_dict(), "data_sha256": run.inputs[str(args.data)], "sites": list(ds.sites),
             "infill_policy": args.infill_policy}
    save_checkpoint(model, run.path("checkpoint.dcl"), prep.scaler, extra)
    rep = evaluate(model, prep.val)
    run.summary = {"parameters": model.param_total(), "best_epoch": result.best_epoch, "val_mse": rep.mse,
                   "val_mae": rep.mae, "val_mae_mph": rep.mae_mph}
    print(f"best epoch {result.best_epoch} val_mse {rep.mse:.6g} val_mae {rep.mae:.6g} ({rep.mae_mph:.3f} mph)")
    return EXIT_OK


def _load_model(run: Run, path):
    from .model import checkpoint_scaler, load_checkpoint

    run.add_input(path)
    model = load_checkpoint(path)
    scaler = checkpoint_scaler(model)
    if scaler is None:
        raise ValueError(f"checkpoint {path} carries no scaler")
    return model, scaler


def _prep_for_model(args, model, ds):
    """Rebuild the checkpoint's split with its own scaler (never refit)."""
    from .data import apply_scaler, infill, make_samples

    split = model.meta.get("split")
    raw = ds
    import numpy as np

    if np.isnan(ds.values).any():
        raw, _ = infill(ds, model.meta.get("infill_policy", "carry_forward"))
    return raw, split, lambda scaler, days: make_samples(apply_scaler(raw, scaler), days, model.spec.window, model.spec.horizon)


def cmd_evaluate(args, run: Run) -> int:
    from .experiment import naive_report, sfc_report
    from .training import evaluate

    model, scaler = _load_model(run, args.checkpoint)
    ds = _load_data(run, args.data)
    raw, split, mk = _prep_for_model(args, model, ds)
    if split is None:
        raise ValueError("checkpoint has no recorded day split")
    days = split[args.split]
    if not days:
        raise ValueError(f"the {args.split} split is empty")
    samples = mk(scaler, days)
    reps = [(model.spec.variant, evaluate(model, samples)), ("naive", naive_report(samples))]
    if model.spec.window >= 4:
        reps.append(("sfc", sfc_report(samples, scaler, raw.sites, _overrides(run, args))))
    _write_csv(run.path("metrics.csv"), ["model", "mse", "mae", "mse_mph2", "mae_mph", "n_predictions"],
               [(n, repr(r.mse), repr(r.mae), repr(r.mse_mph), repr(r.mae_mph), r.n_predictions) for n, r in reps])
    rep = reps[0][1]
    rows = []
    for i, (date, t) in enumerate(samples.anchors):
        for s, site in enumerate(raw.sites):
            rows.append((date.isoformat(), t + model.spec.horizon - 1, site, repr(float(rep.targets[i, s, 0] * scaler.speed_divisor)),
                         repr(float(rep.predictions[i, s, 0] * scaler.speed_divisor))))
    _write_csv(run.path("predictions.csv"), ["date", "target_slot", "site_id", "observed_mph", "predicted_mph"], rows)
    for n, r in reps:
        print(f"{n:16s} mse {r.mse:.6g} mae {r.mae:.6g} ({r.mae_mph:.3f} mph)")
    run.summary = {n: {"mse": r.mse, "mae": r.mae} for n, r in reps}
    return EXIT_OK


def cmd_ablate(args, run: Run) -> int:
    from .experiment import ablate

    ds = _load_data(run, args.data)
    prep = _prepare(args, ds)
    tests = None if not args.tests else set(args.tests.split(","))

    def show(row):
        m = "skipped" if row.mae is None else f"mse {row.mse:.6g} mae {row.mae:.6g}"
        print(f"{row.test_id} {row.description}: {m}", flush=True)

    rows = ablate(prep, _train_config(args), args.seed, args.skip_training, tests, _overrides(run, args), show,
                  **_scale(args))
    _write_csv(run.path("ablation.csv"), ["test_id", "description", "mse", "mae"],
               [(r.test_id, r.description, _fmt(r.mse), _fmt(r.mae)) for r in rows])
    run.summary = {r.test_id: {"mse": r.mse, "mae": r.mae, **r.extra} for r in rows}
    return EXIT_OK


def _sweep(args, run: Run, name: str, values, make) -> int:
    from . import plots
    from .experiment import naive_report, sfc_report, train_variant
    from .training import evaluate

    ds = _load_data(run, args.data)
    rows = []
    series = {"D-CLSTM-t": [], "naive": [], "speed-flow curve": []}
    for v in values:
        window, horizon = make(v)
        prep = _prepare(args, ds, window, horizon)
        model, res = train_variant(prep, args.variant, _train_config(args), args.seed, **_scale(args))
        rep = evaluate(model, prep.val)
        nv = naive_report(prep.val)
        sf = sfc_report(prep.val, prep.scaler, prep.raw.sites) if window >= 4 else None
        minutes = 15 * v
        rows.append((v, minutes, len(prep.train) // len(prep.split.train), repr(rep.mse), repr(rep.mae),
                     repr(nv.mse), repr(nv.mae), _fmt(sf.mse if sf else None), _fmt(sf.mae if sf else None)))
        series["D-CLSTM-t"].append(rep.mae)
        series["naive"].append(nv.mae)
        series["speed-flow curve"].append(sf.mae if sf else float("nan"))
        print(f"{name} {v} ({minutes} min): mae {rep.mae:.6g} naive {nv.mae:.6g}", flush=True)
    _write_csv(run.path(f"sweep_{name}.csv"),
               [name, "minutes", "samples_per_day", "mse", "mae", "naive_mse", "naive_mae", "sfc_mse", "sfc_mae"], rows)
    run.path(f"sweep_{name}_chart.csv")
    plots.sweep_chart([15 * v for v in values], series, run.path(f"sweep_{name}_chart.svg").with_suffix(""),
                      f"{name} (minutes)")
    return EXIT_OK


def cmd_sweep_horizon(args, run: Run) -> int:
    return _sweep(args, run, "horizon", args.horizons, lambda h: (args.window, h))


def cmd_sweep_window(args, run: Run) -> int:
    return _sweep(args, run, "window", args.windows, lambda n: (n, args.horizon))


def cmd_simulate(args, run: Run) -> int:
    from . import plots
    from .experiment import raw_sample
    from .scenario import assess, read_scenario

    model, scaler = _load_model(run, args.checkpoint)
    ds = _load_data(run, args.data)
    run.add_input(args.scenario)
    n = model.spec.window
    spec, rest = read_scenario(args.scenario, n)
    raw, split, _ = _prep_for_model(args, model, ds)
    if "date" in rest:
        date = dt.date.fromisoformat(rest.pop("date"))
        if date not in raw.dates:
            raise ValueError(f"scenario date {date} is not in the dataset")
        day = raw.dates.index(date)
    else:
        day = split["test"][0] if split and split.get("test") else len(raw.dates) - 1
    end_slot = int(rest.pop("end_slot", 28))
    threshold = float(rest.pop("threshold", args.threshold))
    if rest:
        raise UsageError(f"unknown scenario keys: {sorted(rest)}")
    sample = raw_sample(raw, day, end_slot, n, model.spec.horizon)
    report = assess(model, sample, spec, scaler, threshold, args.spacing_km)
    plots.incident_chart(report, run.path("incident.svg").with_suffix(""))
    run.path("incident.csv")
    summary = report.summary()
    summary.update({"date": raw.dates[day].isoformat(), "end_slot": end_slot})
    run.path("impact.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.summary = summary
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_plot(args, run: Run) -> int:
    from . import plots
    from .data import SPEED, TOTAL

    ds = _load_data(run, args.data)
    if not 0 <= args.day < len(ds.dates):
        raise UsageError(f"--day {args.day} outside 0..{len(ds.dates) - 1}")
    n = plots.flow_speed_scatter(ds, run.path("flow_speed.svg").with_suffix(""))
    run.path("flow_speed.csv")
    plots.space_time_heatmap(ds, run.path("heatmap_speed.svg").with_suffix(""), args.day, SPEED)
    run.path("heatmap_speed.csv")
    plots.space_time_heatmap(ds, run.path("heatmap_flow.svg").with_suffix(""), args.day, TOTAL)
    run.path("heatmap_flow.csv")
    run.summary = {"scatter_points": n}
    if args.checkpoint:
        from .training import evaluate

        model, scaler = _load_model(run, args.checkpoint)
        raw, split, mk = _prep_for_model(args, model, ds)
        days = split[args.split] if split else [args.day]
        samples = mk(scaler, days)
        rep = evaluate(model, samples)
        site = args.site
        if not 0 <= site < len(raw.sites):
            raise UsageError(f"--site {site} outside 0..{len(raw.sites) - 1}")
        first = [i for i, (d, _) in enumerate(samples.anchors) if d == samples.anchors[0][0]]
        labels = [f"{samples.anchors[i][0].isoformat()} {samples.anchors[i][1] + model.spec.horizon - 1}" for i in first]
        obs = rep.targets[first, site, 0] * scaler.speed_divisor
        pred = rep.predictions[first, site, 0] * scaler.speed_divisor
        plots.prediction_panel(obs, pred, run.path("prediction.svg").with_suffix(""), labels,
                               f"site {raw.sites[site]}, {samples.anchors[0][0].isoformat()}")
        run.path("prediction.csv")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    g.add_argument("--config", default=argparse.SUPPRESS, help="key = value file; flags win")
    g.add_argument("--out-dir", default=argparse.SUPPRESS, help="fresh run directory")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS threads")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def _split_args(p) -> None:
    p.add_argument("--val-days", type=int, default=None, help="validation days (default 5 of 42)")
    p.add_argument("--test-days", type=int, default=None, help="test days (default 2 of 42)")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--infill-policy", choices=("carry_forward", "interpolate"), default="carry_forward")


def _train_args(p, variant=True) -> None:
    p.add_argument("--data", required=True, help="dataset cache from synth or ingest")
    if variant:
        p.add_argument("--variant", default="dclstm-t")
    p.add_argument("--window", type=int, default=4, help="history slots")
    p.add_argument("--horizon", type=int, default=1, help="lead time in slots")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--l2", type=float, default=0.0002)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--filters", type=int_list, default=None, help="e.g. 8,16,32 (default 32,64,128)")
    p.add_argument("--space-units", type=int, default=None, help="first space LSTM width (default 60)")
    _split_args(p)


def build_parser() -> Parser:
    parser = Parser(prog="dclstm", description=__doc__.splitlines()[0])
    _common(parser)
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("synth", help="synthesize a corridor dataset")
    p.add_argument("--sites", type=int, default=60)
    p.add_argument("--days", type=int, default=42)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--incident-rate", type=float, default=None)
    p.add_argument("--queue-speed", type=float, default=None, help="km/h")
    p.add_argument("--no-day-modifiers", action="store_true")
    p.add_argument("--csv", action="store_true", help="also write the corridor as CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="ingest WebTRIS-style CSV files")
    p.add_argument("csv", nargs="+")
    p.add_argument("--site-order", help="file listing site ids downstream to upstream")
    p.add_argument("--max-missing", type=float, default=0.10)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one variant")
    _train_args(p)
    p.add_argument("--bn-before-activation", action="store_true")
    p.add_argument("--raw-reshape", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against the baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.add_argument("--sfc-overrides", help="CSV site_id,table3_row")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="ablation table over tests a-f, h-k")
    _train_args(p, variant=False)
    p.add_argument("--skip-training", action="store_true")
    p.add_argument("--tests", help="comma list of test ids to train (default all)")
    p.add_argument("--sfc-overrides", help="CSV site_id,table3_row")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-horizon", help="train one model per lead time")
    _train_args(p)
    p.add_argument("--horizons", type=int_list, default=[1, 2, 3, 4, 5, 6])
    p.set_defaults(func=cmd_sweep_horizon)

    p = sub.add_parser("sweep-window", help="train one model per history length")
    _train_args(p)
    p.add_argument("--windows", type=int_list, default=[2, 4, 6, 8, 10, 12])
    p.set_defaults(func=cmd_sweep_window)

    p = sub.add_parser("simulate", help="incident what-if on a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--threshold", type=float, default=5.0, help="mph drop that counts as affected")
    p.add_argument("--spacing-km", type=float, default=0.5)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot", help="flow-speed scatter, heatmaps and prediction panels")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--day", type=int, default=0)
    p.add_argument("--site", type=int, default=0)
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.set_defaults(func=cmd_plot)

    for sp in sub.choices.values():
        _common(sp)
    return parser


GLOBAL_DEFAULTS = {"seed": 0, "config": None, "out_dir": None, "threads": None, "verbose": False}


def _apply_config(parser: Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    if args.command is None:
        parser.error("a command is required")
    if not args.config:
        return args
    cfg = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions + parser._actions}
    given = set()
    for a in actions.values():
        if any(opt in argv or any(x.startswith(opt + "=") for x in argv) for opt in a.option_strings):
            given.add(a.dest)
    for key, text in cfg.items():
        if key not in actions:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if key in given:
            continue
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            value = text.lower() in ("1", "true", "yes", "on")
        elif a.type is not None:
            try:
                value = a.type(text)
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"config key {key}: {e}") from None
        else:
            value = text
        if a.choices is not None and value not in a.choices:
            raise UsageError(f"config key {key}: {value!r} not in {sorted(a.choices)}")
        setattr(args, key, value)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as e:
        print(f"dclstm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"dclstm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    set_threads(args.threads)

    from .container import ContainerError
    from .data import DataError
    from .model import SpecConflictError
    from .training import NumericError

    try:
        run = Run(args.command, args)
        code = args.func(args, run)
        run.finish()
        return code
    except UsageError as e:
        print(f"dclstm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"dclstm: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ContainerError, SpecConflictError, FileNotFoundError, ValueError) as e:
        print(f"dclstm: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
