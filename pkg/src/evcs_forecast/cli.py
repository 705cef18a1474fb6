"""Command-line entry point.

Subcommands: synth, transform, train-lstm, train-aeppo, train, forecast,
evaluate, score, bands. Exit codes: 0 success, 1 invalid input, 2 numeric
failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, fields
from datetime import datetime
from pathlib import Path

from . import __version__
from .aeppo import train_aeppo
from .lstm import params_from_dict, params_to_dict
from .metrics import (GaussianForecast, crps_gaussian, pi_bounds, pi_quantiles, pinball,
                      winkler_from_band)
from .numerics import NumericError
from .pipeline import (ModelBundle, PipelineConfig, Split, StageError, ValidationError, bands_csv,
                       calibration_series, evaluate, forecast_next, run_training, train_forecaster,
                       training_series)
from .sessions import (SynthConfig, dumps_csv, dumps_json, from_acn, generate_synthetic,
                       load_sessions)
from .transformer import FrameSeries, Normalizer, aggregate_frames, frames_from_csv, frames_to_csv

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64
ARTIFACTS_ENV = "EVCS_FORECAST_ARTIFACTS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# Config plumbing
# --------------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model config (overrides --config)")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if f.name == "seed":
            continue  # shared top-level flag
        if isinstance(default, bool):
            g.add_argument(flag, dest=f"cfg_{f.name}", action=argparse.BooleanOptionalAction,
                           default=None, help=f"default {default}")
        elif isinstance(default, tuple):
            g.add_argument(flag, dest=f"cfg_{f.name}", type=int, nargs="+", default=None,
                           help=f"default {' '.join(map(str, default))}")
        else:
            g.add_argument(flag, dest=f"cfg_{f.name}", type=type(default), default=None,
                           help=f"default {default}")


def resolve_config(args) -> PipelineConfig:
    """Defaults, then the JSON file, then explicit flags."""
    values = PipelineConfig().to_dict()
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(from_file, dict):
            raise ValidationError("config file must hold a JSON object")
        values.update(from_file)
    for f in fields(PipelineConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return PipelineConfig.from_dict(values).validate()


def _artifacts(args) -> Path:
    path = Path(args.artifacts or os.environ.get(ARTIFACTS_ENV) or "artifacts")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _echo(out_dir: Path, cfg: PipelineConfig):
    _write(out_dir / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _echo_args(out: Path, args):
    """Effective settings of a data command, written beside its output file."""
    settings = {k: v for k, v in sorted(vars(args).items()) if k != "func" and not k.startswith("cfg_")}
    _write(out.with_name(out.name + ".config.json"), json.dumps(settings, indent=2, sort_keys=True) + "\n")


def _read_frames(args, strict=False) -> FrameSeries:
    if getattr(args, "frames", None):
        return frames_from_csv(Path(args.frames).read_text(encoding="utf-8"))
    if getattr(args, "sessions", None):
        return aggregate_frames(load_sessions(args.sessions), strict=strict)
    raise ValidationError("give --frames or --sessions")


def _history_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth(args):
    args.seed = 0 if args.seed is None else args.seed
    if args.kind == "calibration":
        text = frames_to_csv(calibration_series(args.hours, args.seed).frames)
    else:
        cfg = SynthConfig(horizon_hours=args.hours, chargers=args.chargers, arrival_rate=args.rate,
                          mean_stay_hours=args.stay, mean_demand_kwh=args.demand,
                          charge_rate_kw=args.charge_rate, noise_std=args.noise_std, seed=args.seed)
        try:
            sessions = generate_synthetic(cfg)
        except ValueError as e:
            raise ValidationError(str(e)) from e
        text = dumps_csv(sessions) if args.out.endswith(".csv") else dumps_json(sessions)
    _write(Path(args.out), text)
    _echo_args(Path(args.out), args)
    print(args.out)


def cmd_transform(args):
    if args.acn:
        sessions = from_acn(Path(args.sessions).read_text(encoding="utf-8"))
    else:
        sessions = load_sessions(args.sessions)
    frames = aggregate_frames(sessions, strict=args.strict)
    _write(Path(args.out), frames_to_csv(frames))
    _echo_args(Path(args.out), args)
    print(args.out)


def cmd_train_lstm(args):
    cfg = resolve_config(args)
    out = _artifacts(args)
    frames = _read_frames(args, cfg.strict_transform)
    params, norm, split, history, _ = train_forecaster(frames, cfg)
    stage = {"lstm": params_to_dict(params), "normalizer": norm.to_dict(),
             "split": asdict(split),
             "config": cfg.to_dict()}
    _write(out / "lstm.json", json.dumps(stage, sort_keys=True))
    _write(out / "lstm_history.csv", _history_csv(history, ("epoch", "train_mse", "valid_mse")))
    _echo(out, cfg)
    print(out / "lstm.json")


def cmd_train_aeppo(args):
    cfg = resolve_config(args)
    out = _artifacts(args)
    stage = json.loads(Path(args.lstm or out / "lstm.json").read_text())
    params = params_from_dict(stage["lstm"])
    norm = Normalizer.from_dict(stage["normalizer"])
    split = Split(**stage["split"])
    frames = _read_frames(args, cfg.strict_transform)
    if len(frames) != split.n_frames or int(frames.t[0]) != split.first_hour:
        raise ValidationError("frames do not match the series the LSTM was trained on")
    values = norm.forward(frames.values)
    series = training_series(params, values, frames.t, split.train_end, cfg.n_hist)
    result = train_aeppo(series, cfg.aeppo_config())
    tag = "lstm-aeppo" if cfg.mode == "aeppo" else "lstm-ppo"
    bundle = ModelBundle(params, norm, result.actor, result.critic, cfg, split, tag)
    bundle.save(out / "bundle.json")
    _write(out / "training_log.csv", result.log_csv())
    _echo(out, cfg)
    print(f"{out / 'bundle.json'} {bundle.digest()}")


def cmd_train(args):
    cfg = resolve_config(args)
    out = _artifacts(args)
    frames = _read_frames(args, cfg.strict_transform)
    run = run_training(frames, cfg)
    run.bundle.save(out / "bundle.json")
    _write(out / "lstm_history.csv", _history_csv(run.lstm_history, ("epoch", "train_mse", "valid_mse")))
    _write(out / "training_log.csv", run.aeppo.log_csv())
    _echo(out, cfg)
    print(f"{out / 'bundle.json'} {run.bundle.digest()}")


def _bundle(args, out: Path) -> ModelBundle:
    return ModelBundle.load(args.bundle or out / "bundle.json")


def cmd_forecast(args):
    out = _artifacts(args)
    bundle = _bundle(args, out)
    f = forecast_next(bundle, _read_frames(args))
    result = {"mu": f.mu, "delta": f.delta}
    for p in bundle.config.pis:
        band = pi_bounds(f, p)
        result[f"lower{p}"], result[f"upper{p}"] = band.lower, band.upper
    print(json.dumps(result, sort_keys=True))


def _origin(args):
    if not getattr(args, "origin", None):
        return None
    try:
        return datetime.fromisoformat(args.origin)
    except ValueError as e:
        raise ValidationError(f"bad --origin: {e}") from e


def cmd_evaluate(args):
    out = _artifacts(args)
    bundle = _bundle(args, out)
    report = evaluate(bundle, _read_frames(args), args.pis, args.start_hour, _origin(args))
    _write(out / "report.csv", report.report_csv())
    _write(out / "summary.csv", report.summary_csv())
    _write(out / "bands.csv", bands_csv(report))
    _echo(out, bundle.config)
    sys.stdout.write(report.report_csv() + report.summary_csv())


def cmd_bands(args):
    out = _artifacts(args)
    bundle = _bundle(args, out)
    report = evaluate(bundle, _read_frames(args), None, args.start_hour)
    _write(out / "bands.csv", bands_csv(report))
    _echo(out, bundle.config)
    print(out / "bands.csv")


SCORE_HEADER = ("mu", "delta", "y")


def score_rows(rows, pis=(30, 60, 90)) -> list[dict]:
    """Per-row CRPS, Winkler and Pinball for ``(mu, delta, y)`` triples."""
    out = []
    for mu, delta, y in rows:
        f = GaussianForecast(mu, delta)
        r = {"mu": mu, "delta": delta, "y": y, "crps": crps_gaussian(f, y)}
        for p in pis:
            band = pi_bounds(f, p)
            r[f"winkler{p}"] = winkler_from_band(band.lower, band.upper, y)
            r[f"pinball{p}"] = pinball(f, y, pi_quantiles(p))[1]
        r["pinball_avg"] = pinball(f, y)[1]
        out.append(r)
    return out


def _read_csv(path, required) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or ())]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {','.join(missing)}")
        return list(reader)


def _forecast_rows(args):
    """``(t or None, mu, delta, y)`` from a forecasts CSV, optionally joined with actuals on ``t``."""
    if args.actuals:
        actuals = {int(r["t"]): float(r["y"]) for r in _read_csv(args.actuals, ("t", "y"))}
        rows = []
        for r in _read_csv(args.forecasts, ("t", "mu", "delta")):
            t = int(r["t"])
            if t not in actuals:
                raise ValidationError(f"no actual value for hour {t}")
            rows.append((t, float(r["mu"]), float(r["delta"]), actuals[t]))
        return rows
    recs = _read_csv(args.forecasts, SCORE_HEADER)
    return [(int(r["t"]) if r.get("t") not in (None, "") else None,
             float(r["mu"]), float(r["delta"]), float(r["y"])) for r in recs]


def cmd_score(args):
    if args.forecasts:
        rows = _forecast_rows(args)
    elif None not in (args.mu, args.delta, args.y):
        rows = [(None, args.mu, args.delta, args.y)]
    else:
        raise ValidationError("give --forecasts or all of --mu, --delta, --y")
    try:
        scored = score_rows([r[1:] for r in rows], args.pis)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    if rows and rows[0][0] is not None:
        scored = [dict(t=r[0], **s) for r, s in zip(rows, scored)]
    sys.stdout.write(_history_csv(scored, list(scored[0]) if scored else list(SCORE_HEADER)))


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evcs-forecast", description="Probabilistic hourly charging-load forecasting.")
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("--artifacts", default=None,
                        help=f"artifacts directory (env {ARTIFACTS_ENV}, default ./artifacts)")
    data = _Parser(add_help=False)
    data.add_argument("--frames", help="hourly frames CSV (t,E,T,D)")
    data.add_argument("--sessions", help="sessions file (JSON or CSV)")
    model = _Parser(add_help=False)
    model.add_argument("--config", help="JSON config file")
    _config_flags(model)

    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic sessions or a calibration series")
    s.add_argument("--kind", choices=("sessions", "calibration"), default="sessions")
    s.add_argument("--hours", type=int, default=720)
    s.add_argument("--chargers", type=int, default=5)
    s.add_argument("--rate", type=float, default=0.1, help="arrivals per charger-hour")
    s.add_argument("--stay", type=float, default=4.0, help="mean stay, hours")
    s.add_argument("--demand", type=float, default=15.0, help="mean requested energy, kWh")
    s.add_argument("--charge-rate", type=float, default=6.6, help="charging power, kW")
    s.add_argument("--noise-std", type=float, default=5.0, help="std of requested energy, kWh")
    s.add_argument("--out", required=True, help="output path (.json or .csv)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("transform", parents=[common], help="sessions to hourly frames CSV")
    s.add_argument("--sessions", required=True)
    s.add_argument("--strict", action="store_true", help="literal per-hour rules without boundary fixes")
    s.add_argument("--acn", action="store_true", help="input is an ACN-Data JSON export")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("train-lstm", parents=[common, data, model], help="fit the point forecaster")
    s.set_defaults(func=cmd_train_lstm)

    s = sub.add_parser("train-aeppo", parents=[common, data, model], help="fit the scale policy")
    s.add_argument("--lstm", help="LSTM stage file (default <artifacts>/lstm.json)")
    s.set_defaults(func=cmd_train_aeppo)

    s = sub.add_parser("train", parents=[common, data, model], help="full training run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("forecast", parents=[common, data], help="forecast the hour after the last frame")
    s.add_argument("--bundle")
    s.set_defaults(func=cmd_forecast)

    for name, func, help_ in (("evaluate", cmd_evaluate, "score rolling forecasts on the test range"),
                              ("bands", cmd_bands, "write prediction-band CSV")):
        s = sub.add_parser(name, parents=[common, data], help=help_)
        s.add_argument("--bundle")
        s.add_argument("--start-hour", type=int, default=None, help="first hour to forecast (default: test split)")
        if name == "evaluate":
            s.add_argument("--pis", type=int, nargs="+", default=None)
            s.add_argument("--origin", help="ISO datetime of hour 0, enables seasonal grouping")
        s.set_defaults(func=func)

    s = sub.add_parser("score", parents=[common], help="score Gaussian forecasts")
    s.add_argument("--forecasts", help="CSV with columns mu,delta,y (t optional), or t,mu,delta with --actuals")
    s.add_argument("--actuals", help="CSV with columns t,y joined to --forecasts on t")
    s.add_argument("--mu", type=float)
    s.add_argument("--delta", type=float)
    s.add_argument("--y", type=float)
    s.add_argument("--pis", type=int, nargs="+", default=[30, 60, 90])
    s.set_defaults(func=cmd_score)
    return p


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValidationError("--threads must be >= 1")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        _set_threads(args.threads)
        args.func(args)
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as e:
        print(f"error in stage {e}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(e.cause, ArithmeticError) else EXIT_INVALID
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
