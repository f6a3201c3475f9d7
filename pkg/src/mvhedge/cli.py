"""Command-line entry point: synth, train, eval, predict and curve.

Every option can also be given in a ``key = value`` config file passed with
``--config``; command-line flags win over the file, and the file wins over
built-in defaults. Each run writes its fully resolved configuration to
``<out-dir>/<command>_config.txt``, which can be fed back through ``--config``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data_pipeline import (ModelVariant, SampleSet, build_sequences, default_test_start,
                            dominant_filter, filter_quotes, load_quotes, market_context,
                            pair_consecutive, quote_samples, split_dataset, write_quotes)
from .errors import ConfigurationError, HedgeError
from .hedge_models import build_model
from .market_math import OptionKind
from .synth_market import GeneratorConfig, generate_quote_panel
from .train_eval import (TrainConfig, evaluate, hedge_ratio_curve, train, write_curve,
                         write_train_log)

PROG = "mvhedge"
# keys written into echoed configs that are informational only
_ECHO_ONLY = {"command", "version"}


class UsageError(Exception):
    """Bad or missing arguments; reported with exit code 2."""


# --------------------------------------------------------------------------
# option tables


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _date(text: str) -> dt.date:
    return dt.date.fromisoformat(str(text).strip())


def _kind(text: str) -> OptionKind:
    t = str(text).strip().lower()
    return {"call": OptionKind.CALL, "put": OptionKind.PUT}.get(t) or OptionKind.parse(text)


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any]
    default: Any = None
    help: str = ""


_GEN = GeneratorConfig()

SHARED = [
    Opt("out_dir", Path, Path("."), "directory for all outputs"),
    Opt("seed", int, None, "random seed"),
]

COMMANDS: dict[str, list[Opt]] = {
    "synth": [
        Opt("out", str, "panel.csv", "quote CSV to write (relative to --out-dir)"),
        Opt("n_days", int, _GEN.n_days),
        Opt("spot0", float, _GEN.spot0),
        Opt("vol0", float, _GEN.vol0),
        Opt("long_vol", float, _GEN.long_vol),
        Opt("mean_rev", float, _GEN.mean_rev),
        Opt("vol_of_vol", float, _GEN.vol_of_vol),
        Opt("corr", float, _GEN.corr),
        Opt("rate", float, _GEN.rate),
        Opt("div_yield", float, _GEN.div_yield),
        Opt("strikes", _floats, list(_GEN.strike_grid), "comma-separated strike/spot multiples"),
        Opt("maturities", _ints, list(_GEN.maturity_grid), "comma-separated maturities in days"),
        Opt("roll_every", int, _GEN.roll_every),
        Opt("start_date", _date, _GEN.start_date),
    ],
    "train": [
        Opt("variant", ModelVariant.parse, None, "dnn2, dnn3, dnn2+, dnn3+, dnn3*, dnngru, hw or bs"),
        Opt("kind", _kind, None, "call or put"),
        Opt("data", Path, None, "quote CSV"),
        Opt("test_start", _date, None, "first test date (default: last 10%% of trading days)"),
        Opt("val_fraction", float, 0.2),
        Opt("batch_size", int, TrainConfig.batch_size),
        Opt("learning_rate", float, TrainConfig.learning_rate),
        Opt("max_epochs", int, TrainConfig.max_epochs),
        Opt("patience", int, TrainConfig.patience),
        Opt("clip_norm", float, TrainConfig.clip_norm),
        Opt("eval_every", int, TrainConfig.eval_every),
        Opt("output", str, "clamp", "network output layer: clamp or sigmoid"),
        Opt("checkpoint", str, "model.mvhg", "checkpoint to write"),
        Opt("log", str, "train_log.csv", "training log to write"),
        Opt("plot", _bool, True),
    ],
    "eval": [
        Opt("checkpoint", Path, None),
        Opt("data", Path, None),
        Opt("kind", _kind, None, "expected option kind; must match the checkpoint"),
        Opt("test_start", _date, None),
        Opt("report", str, "eval_report.csv"),
        Opt("plot", _bool, True),
    ],
    "predict": [
        Opt("checkpoint", Path, None),
        Opt("data", Path, None),
        Opt("kind", _kind, None),
        Opt("out", str, "hedge_ratios.csv"),
    ],
    "curve": [
        Opt("checkpoint", Path, None),
        Opt("kind", _kind, None),
        Opt("sentiment", str, "median", "median, stress, a number, or 'vix,return' for dnn3*"),
        Opt("data", Path, None, "quote CSV used to resolve the median/stress presets"),
        Opt("ttm_days", float, 30.0),
        Opt("grid_start", float, 0.05, "first |delta| of the grid"),
        Opt("grid_stop", float, 0.95),
        Opt("grid_step", float, 0.05),
        Opt("vol", float, 0.2, "volatility used to map delta to moneyness and vega"),
        Opt("rate", float, 0.0),
        Opt("div_yield", float, 0.0),
        Opt("out", str, "curve.csv"),
        Opt("plot", _bool, True),
    ],
}

REQUIRED = {
    "synth": (),
    "train": ("variant", "kind", "data"),
    "eval": ("checkpoint", "data"),
    "predict": ("checkpoint", "data"),
    "curve": ("checkpoint",),
}

DEFAULT_SEED = {"synth": _GEN.seed}


# --------------------------------------------------------------------------
# parsing and config resolution


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", type=Path, help="key = value config file")
        for opt in SHARED + opts:
            flag = "--" + opt.name.replace("_", "-")
            if opt.type is _bool:
                p.add_argument(flag, dest=opt.name, type=_bool, metavar="BOOL", help=opt.help)
                p.add_argument("--no-" + opt.name.replace("_", "-"), dest=opt.name,
                               action="store_false", help=f"same as {flag} false")
            else:
                p.add_argument(flag, dest=opt.name, type=opt.type, help=opt.help)
    return parser


def read_config_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, flags: dict[str, Any]) -> dict[str, Any]:
    """Defaults, then config file, then flags."""
    opts = {o.name: o for o in SHARED + COMMANDS[command]}
    cfg = {name: o.default for name, o in opts.items()}
    cfg["seed"] = DEFAULT_SEED.get(command, 0)
    config_path = flags.pop("config", None)
    if config_path is not None:
        for key, text in read_config_file(config_path).items():
            if key in _ECHO_ONLY:
                continue
            if key not in opts:
                raise UsageError(f"{config_path}: unknown key {key!r} for '{command}'")
            try:
                cfg[key] = opts[key].type(text)
            except (ValueError, HedgeError) as exc:
                raise UsageError(f"{config_path}: bad value for {key!r}: {exc}") from exc
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _fmt(value: Any) -> str:
    if isinstance(value, ModelVariant):
        return value.value
    if isinstance(value, OptionKind):
        return "call" if value is OptionKind.CALL else "put"
    if isinstance(value, (list, tuple)):
        return ",".join(repr(v) for v in value)
    if isinstance(value, dt.date):
        return value.isoformat()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(command: str, cfg: dict[str, Any]) -> Path:
    out_dir = Path(cfg["out_dir"])
    path = out_dir / f"{command}_config.txt"
    lines = [f"command = {command}", f"version = {PROG} {__version__}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted(cfg.items()) if v is not None]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _out(cfg: dict[str, Any], name: str) -> Path:
    return Path(cfg["out_dir"]) / cfg[name]


# --------------------------------------------------------------------------
# shared pipeline pieces


def load_samples(data: Path, variant: ModelVariant, kind: OptionKind
                 ) -> tuple[pd.DataFrame, SampleSet]:
    """load -> filter -> pair (or sequence) for one variant and option kind."""
    raw = load_quotes(data)
    if raw.empty:
        raise ConfigurationError(f"{data}: no quote rows")
    market = market_context(raw)
    quotes = filter_quotes(raw)
    if quotes.empty:
        raise ConfigurationError(
            f"{data}: no quotes survive filtering; dominant filter: {dominant_filter(raw)}")
    if variant is ModelVariant.DNNGRU:
        samples = build_sequences(quotes, kind, market)
    else:
        samples = pair_consecutive(quotes, variant, kind, market)
    if len(samples) == 0:
        raise ConfigurationError(f"{data}: no {kind.name.lower()} samples after pairing")
    return raw, samples


def _test_start(cfg: dict[str, Any], raw: pd.DataFrame) -> dt.date:
    return cfg["test_start"] or default_test_start(raw)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict[str, Any]) -> int:
    gen = GeneratorConfig(
        n_days=cfg["n_days"], spot0=cfg["spot0"], vol0=cfg["vol0"], long_vol=cfg["long_vol"],
        mean_rev=cfg["mean_rev"], vol_of_vol=cfg["vol_of_vol"], corr=cfg["corr"],
        rate=cfg["rate"], div_yield=cfg["div_yield"], strike_grid=list(cfg["strikes"]),
        maturity_grid=list(cfg["maturities"]), seed=cfg["seed"],
        start_date=cfg["start_date"], roll_every=cfg["roll_every"])
    panel = generate_quote_panel(gen)
    path = _out(cfg, "out")
    write_quotes(panel, path)
    print(f"wrote {len(panel)} quote rows to {path}")
    return 0


def cmd_train(cfg: dict[str, Any]) -> int:
    variant, kind = cfg["variant"], cfg["kind"]
    raw, samples = load_samples(cfg["data"], variant, kind)
    test_start = _test_start(cfg, raw)
    cfg["test_start"] = test_start
    split = split_dataset(samples, test_start, cfg["val_fraction"], seed=cfg["seed"])
    tcfg = TrainConfig(batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                       max_epochs=cfg["max_epochs"], patience=cfg["patience"],
                       clip_norm=cfg["clip_norm"], seed=cfg["seed"], eval_every=cfg["eval_every"])
    kw = {}
    if variant not in (ModelVariant.HW, ModelVariant.BS):
        kw["output"] = cfg["output"]
    model = build_model(variant, kind, seed=cfg["seed"], **kw)
    model, log = train(model, split, tcfg)
    save_checkpoint(model, _out(cfg, "checkpoint"))
    write_train_log(log, _out(cfg, "log"))
    if cfg["plot"] and log:
        from .plotting import plot_training_log
        plot_training_log(log, _out(cfg, "log").with_suffix(".png"))
    print(f"trained {variant.value} ({kind.name.lower()}) on {len(split.train)} samples, "
          f"{len(split.validation)} validation, {len(split.test)} held out from {test_start}; "
          f"{len(log)} epochs")
    return 0


def cmd_eval(cfg: dict[str, Any]) -> int:
    model = load_checkpoint(cfg["checkpoint"], expect_kind=cfg["kind"])
    raw, samples = load_samples(cfg["data"], model.variant, model.kind)
    test_start = _test_start(cfg, raw)
    cfg["test_start"] = test_start
    test = samples.take(np.flatnonzero(samples.quote_date >= np.datetime64(test_start, "D")))
    if len(test) == 0:
        raise ConfigurationError(f"no test samples on or after {test_start}")
    report = evaluate(model, test)
    path = _out(cfg, "report")
    report.to_csv(path)
    if cfg["plot"]:
        from .plotting import plot_gain_by_bucket
        plot_gain_by_bucket(report, path.with_suffix(".png"),
                            title=f"{model.variant.value} {model.kind.name.lower()}")
    gain = report.overall.gain
    print(f"evaluated {len(test)} test samples; overall gain "
          f"{'undefined' if gain is None else f'{gain:.6f}'}")
    return 0


def cmd_predict(cfg: dict[str, Any]) -> int:
    model = load_checkpoint(cfg["checkpoint"], expect_kind=cfg["kind"])
    raw = load_quotes(cfg["data"])
    market = market_context(raw)
    quotes = filter_quotes(raw)
    if quotes.empty:
        raise ConfigurationError(
            f"{cfg['data']}: no quotes survive filtering; dominant filter: {dominant_filter(raw)}")
    rows, samples = quote_samples(quotes, model.variant, model.kind, market)
    pred = model.predict(samples) if len(samples) else np.empty(0)
    path = _out(cfg, "out")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quote_date", "expiry_date", "strike", "cp_flag", "bs_delta", "hedge_ratio"])
        for (_, r), p in zip(rows.iterrows(), pred):
            w.writerow([r["quote_date"].date().isoformat(), r["expiry_date"].date().isoformat(),
                        repr(float(r["strike"])), r["cp_flag"], repr(float(r["delta"])),
                        repr(float(p))])
    print(f"wrote {len(pred)} hedge ratios to {path}")
    return 0


SENTIMENT_PRESETS = ("median", "stress")


def resolve_sentiment(text: str, kind: OptionKind, variant: ModelVariant,
                      data: Optional[Path]):
    """Sentiment level in feature units.

    Presets come from the daily history in ``data``: ``median`` is the median
    level; ``stress`` is the 95th percentile of VIX/100 for calls and the 5th
    percentile of the daily log-return for puts.
    """
    text = text.strip().lower()
    if text in SENTIMENT_PRESETS:
        if data is None:
            raise UsageError(f"sentiment preset {text!r} needs --data to compute levels")
        market = market_context(load_quotes(data))
        vix = market["vix"].dropna().to_numpy() / 100.0
        ret = market["log_return"].dropna().to_numpy()
        if len(vix) == 0 or len(ret) == 0:
            raise ConfigurationError(f"{data}: not enough daily history for sentiment presets")
        if text == "median":
            v, r = float(np.median(vix)), float(np.median(ret))
        else:
            v, r = float(np.quantile(vix, 0.95)), float(np.quantile(ret, 0.05))
        if variant is ModelVariant.DNN3STAR:
            return (v, r)
        return v if kind is OptionKind.CALL else r
    try:
        values = _floats(text)
    except ValueError as exc:
        raise UsageError(f"bad sentiment {text!r}") from exc
    if variant is ModelVariant.DNN3STAR:
        if len(values) != 2:
            raise UsageError("dnn3* needs sentiment 'vix,return' (two numbers)")
        return (values[0], values[1])
    if len(values) != 1:
        raise UsageError(f"bad sentiment {text!r}")
    return values[0]


def delta_grid(start: float, stop: float, step: float, kind: OptionKind) -> list[float]:
    """Grid of |delta| values from start to stop inclusive, signed by kind."""
    if step <= 0 or stop < start:
        raise UsageError("grid needs step > 0 and stop >= start")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    mags = [round(start + i * step, 10) for i in range(n)]
    if kind is OptionKind.PUT:
        return [-m for m in reversed(mags)]
    return mags


def cmd_curve(cfg: dict[str, Any]) -> int:
    model = load_checkpoint(cfg["checkpoint"], expect_kind=cfg["kind"])
    sentiment = resolve_sentiment(cfg["sentiment"], model.kind, model.variant, cfg["data"])
    grid = delta_grid(cfg["grid_start"], cfg["grid_stop"], cfg["grid_step"], model.kind)
    curve = hedge_ratio_curve(model, cfg["ttm_days"] / 365.0, sentiment, grid,
                              vol=cfg["vol"], rate=cfg["rate"], div_yield=cfg["div_yield"])
    path = _out(cfg, "out")
    write_curve(curve, path)
    if cfg["plot"]:
        from .plotting import plot_hedge_ratio_curves
        plot_hedge_ratio_curves({f"{model.variant.value} ({cfg['sentiment']})": curve},
                                model.kind, path.with_suffix(".png"),
                                title=f"TTM {cfg['ttm_days']:g} days")
    print(f"wrote {len(curve)} curve points to {path}")
    return 0


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "curve": cmd_curve}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = vars(ns)
    command = flags.pop("command")
    try:
        cfg = resolve(command, flags)
        Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
        echo_config(command, cfg)
        status = HANDLERS[command](cfg)
        echo_config(command, cfg)  # again, now with values resolved from the data
        return status
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except (HedgeError, OSError, ValueError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
