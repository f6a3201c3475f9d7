"""Quote-panel ingestion, filtering, daily pairing, features and dataset splits.

A quote panel is a :class:`pandas.DataFrame` with one row per
:class:`OptionQuote` and the columns of :data:`QUOTE_COLUMNS`. Hedge samples
are held column-wise in a :class:`SampleSet`; iterating one yields
:class:`HedgeSample` records.
"""
from __future__ import annotations

import csv
import datetime as dt
import enum
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigurationError, DomainError, SchemaError
from .market_math import OptionKind

logger = logging.getLogger(__name__)

QUOTE_COLUMNS = (
    "quote_date", "expiry_date", "cp_flag", "strike", "bid", "ask", "volume",
    "implied_vol", "delta", "gamma", "vega", "theta", "underlying", "vix",
    "rate", "div_yield",
)
NUMERIC_COLUMNS = QUOTE_COLUMNS[3:]
REQUIRED_FIELDS = ("bid", "ask", "implied_vol", "delta", "gamma", "vega", "theta")

DAYS_PER_YEAR = 365.0
MIN_TTM_DAYS = 14
DELTA_LOW, DELTA_HIGH = 0.05, 0.95
SEQUENCE_LENGTH = 22

# Bucket edges as the doubles nearest the decimal literals, so that e.g.
# delta=0.15 lands in bucket 0.2 exactly as the half-open rule reads.
CALL_EDGES = np.array([round(0.05 + 0.1 * i, 2) for i in range(10)])
PUT_EDGES = -CALL_EDGES[::-1]
CALL_CENTERS = np.array([round(0.1 * (i + 1), 1) for i in range(9)])
PUT_CENTERS = -CALL_CENTERS[::-1]


class ModelVariant(enum.Enum):
    DNN2 = "dnn2"
    DNN3 = "dnn3"
    DNN2PLUS = "dnn2plus"
    DNN3PLUS = "dnn3plus"
    DNN3STAR = "dnn3star"
    DNNGRU = "dnngru"
    HW = "hw"
    BS = "bs"

    @classmethod
    def parse(cls, value: "ModelVariant | str") -> "ModelVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("+", "plus").replace("*", "star")
        key = key.replace("-", "").replace("_", "")
        aliases = {"bsbaseline": "bs", "bsdelta": "bs", "gru": "dnngru"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown model variant {value!r}")


def sentiment_name(kind: OptionKind) -> str:
    return "vix" if kind is OptionKind.CALL else "log_return"


def feature_names(variant: ModelVariant, kind: OptionKind) -> tuple[str, ...]:
    """Raw feature layout of a variant; a pure function of (variant, kind)."""
    base = ("ttm", "bs_delta")
    if variant in (ModelVariant.DNN2, ModelVariant.DNNGRU, ModelVariant.HW, ModelVariant.BS):
        return base
    if variant is ModelVariant.DNN3:
        return base + (sentiment_name(kind),)
    if variant is ModelVariant.DNN2PLUS:
        return base + ("moneyness",)
    if variant is ModelVariant.DNN3PLUS:
        return base + ("moneyness", sentiment_name(kind))
    if variant is ModelVariant.DNN3STAR:
        return base + ("moneyness", "vix", "log_return")
    raise ValueError(variant)


@dataclass(frozen=True)
class OptionQuote:
    quote_date: dt.date
    expiry_date: dt.date
    kind: OptionKind
    strike: float
    bid: float = float("nan")
    ask: float = float("nan")
    volume: float = float("nan")
    implied_vol: float = float("nan")
    delta: float = float("nan")
    gamma: float = float("nan")
    vega: float = float("nan")
    theta: float = float("nan")
    underlying: float = float("nan")
    vix: float = float("nan")
    rate: float = float("nan")
    div_yield: float = float("nan")

    @property
    def ttm_days(self) -> int:
        return (self.expiry_date - self.quote_date).days

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)


@dataclass(frozen=True)
class MarketContext:
    """Same-day market state used by the sentiment features."""

    vix: float
    log_return: float


@dataclass(frozen=True)
class HedgeSample:
    features: np.ndarray
    delta_s: float
    delta_v: float
    bs_delta: float
    bucket: float
    quote_date: dt.date
    kind: OptionKind
    ttm: float
    spot: float
    vega: float


@dataclass(frozen=True)
class SequenceWindow:
    history: np.ndarray
    contract_features: np.ndarray

    def __post_init__(self) -> None:
        if len(self.history) != SEQUENCE_LENGTH:
            raise ValueError(f"history must have length {SEQUENCE_LENGTH}")
        if not (np.all(np.isfinite(self.history)) and np.all(np.isfinite(self.contract_features))):
            raise ValueError("sequence window must be finite")


@dataclass
class SampleSet:
    """Column-wise collection of hedge samples.

    ``features`` holds the raw (unstandardized) inputs laid out per
    ``feature_names``; ``history`` is present only for sequence samples.
    """

    features: np.ndarray
    delta_s: np.ndarray
    delta_v: np.ndarray
    bs_delta: np.ndarray
    bucket: np.ndarray
    quote_date: np.ndarray
    kind: np.ndarray  # +1 calls, -1 puts
    ttm: np.ndarray
    spot: np.ndarray
    vega: np.ndarray
    strike: np.ndarray
    expiry: np.ndarray
    moneyness: np.ndarray
    vix: np.ndarray
    log_return: np.ndarray
    day_index: np.ndarray  # position of quote_date in the trading calendar
    feature_names: tuple[str, ...] = ()
    history: Optional[np.ndarray] = None

    _columns = ("features", "delta_s", "delta_v", "bs_delta", "bucket", "quote_date", "kind",
                "ttm", "spot", "vega", "strike", "expiry", "moneyness", "vix", "log_return",
                "day_index")

    def __len__(self) -> int:
        return len(self.delta_s)

    def take(self, idx) -> "SampleSet":
        kw = {name: getattr(self, name)[idx] for name in self._columns}
        hist = None if self.history is None else self.history[idx]
        return SampleSet(**kw, feature_names=self.feature_names, history=hist)

    def __getitem__(self, i: int) -> HedgeSample:
        return HedgeSample(
            features=self.features[i], delta_s=float(self.delta_s[i]),
            delta_v=float(self.delta_v[i]), bs_delta=float(self.bs_delta[i]),
            bucket=float(self.bucket[i]),
            quote_date=pd.Timestamp(self.quote_date[i]).date(),
            kind=OptionKind.CALL if self.kind[i] > 0 else OptionKind.PUT,
            ttm=float(self.ttm[i]), spot=float(self.spot[i]), vega=float(self.vega[i]),
        )

    def __iter__(self) -> Iterator[HedgeSample]:
        for i in range(len(self)):
            yield self[i]

    def windows(self) -> Iterator[SequenceWindow]:
        if self.history is None:
            raise ValueError("sample set carries no sequence history")
        for i in range(len(self)):
            yield SequenceWindow(self.history[i], self.features[i])

    def with_features(self, variant: ModelVariant, kind: OptionKind) -> "SampleSet":
        names = feature_names(variant, kind)
        return replace(self, features=_stack_features(self, names), feature_names=names)

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        kw = {name: np.concatenate([getattr(p, name) for p in parts]) for name in cls._columns}
        hist = None
        if all(p.history is not None for p in parts):
            hist = np.concatenate([p.history for p in parts])
        return cls(**kw, feature_names=parts[0].feature_names, history=hist)


@dataclass
class DatasetSplit:
    train: SampleSet
    validation: SampleSet
    test: SampleSet


# --------------------------------------------------------------------------
# ingestion


def load_quotes(path: str | Path) -> pd.DataFrame:
    """Read a quote CSV into a panel frame; malformed cells become missing."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise SchemaError(f"{path}: missing header row")
    header = [h.strip() for h in header]
    for col in QUOTE_COLUMNS:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    for col in header:
        if col not in QUOTE_COLUMNS:
            raise SchemaError(f"{path}: unexpected column {col!r}")
    text_cols = {c: str for c in ("quote_date", "expiry_date", "cp_flag")}
    raw = pd.read_csv(path, dtype=text_cols, keep_default_na=False,
                      na_values={c: [""] for c in NUMERIC_COLUMNS}, skipinitialspace=True,
                      float_precision="round_trip")
    raw.columns = header
    return _coerce_frame(raw[list(QUOTE_COLUMNS)])


def _coerce_frame(raw: pd.DataFrame) -> pd.DataFrame:
    out = pd.DataFrame(index=pd.RangeIndex(len(raw)))
    for col in ("quote_date", "expiry_date"):
        out[col] = pd.to_datetime(raw[col].astype(str).str.strip(), format="%Y-%m-%d", errors="coerce")
    flag = raw["cp_flag"].astype(str).str.strip().str.upper()
    out["cp_flag"] = flag.where(flag.isin(["C", "P"]))
    for col in NUMERIC_COLUMNS:
        col_data = raw[col]
        if pd.api.types.is_numeric_dtype(col_data):
            out[col] = col_data.astype(np.float64)
        else:  # some cell failed to parse; convert cell by cell
            out[col] = _parse_floats(col_data.astype(str).str.strip())
    return out


def _parse_floats(text: pd.Series) -> np.ndarray:
    # pandas' fast parser is not correctly rounded; numpy's conversion is, so
    # values written with repr() come back bit-identical.
    valid = pd.to_numeric(text, errors="coerce").notna().to_numpy()
    out = np.full(len(text), np.nan)
    out[valid] = text.to_numpy(dtype=str)[valid].astype(np.float64)
    return out


def write_quotes(frame: pd.DataFrame, path: str | Path) -> None:
    out = frame[list(QUOTE_COLUMNS)].copy()
    for col in ("quote_date", "expiry_date"):
        out[col] = out[col].dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False, lineterminator="\n", na_rep="")


def quotes_to_frame(quotes: Sequence[OptionQuote]) -> pd.DataFrame:
    rows = []
    for q in quotes:
        row = {f.name: getattr(q, f.name) for f in fields(q)}
        row["cp_flag"] = row.pop("kind").value
        rows.append(row)
    frame = pd.DataFrame(rows, columns=list(QUOTE_COLUMNS))
    for col in ("quote_date", "expiry_date"):
        frame[col] = pd.to_datetime(frame[col])
    return frame.astype({c: np.float64 for c in NUMERIC_COLUMNS})


def frame_to_quotes(frame: pd.DataFrame) -> list[OptionQuote]:
    quotes = []
    for rec in frame[list(QUOTE_COLUMNS)].itertuples(index=False):
        d = rec._asdict()
        flag = d.pop("cp_flag")
        quotes.append(OptionQuote(
            quote_date=d.pop("quote_date").date(), expiry_date=d.pop("expiry_date").date(),
            kind=OptionKind.parse(flag), **{k: float(v) for k, v in d.items()},
        ))
    return quotes


# --------------------------------------------------------------------------
# filtering and buckets


def ttm_days(frame: pd.DataFrame) -> pd.Series:
    return (frame["expiry_date"] - frame["quote_date"]).dt.days


def filter_masks(frame: pd.DataFrame) -> dict[str, pd.Series]:
    """Boolean keep-masks, one per filtering rule."""
    delta = frame["delta"]
    is_call = frame["cp_flag"] == "C"
    is_put = frame["cp_flag"] == "P"
    call_ok = is_call & (delta >= DELTA_LOW) & (delta <= DELTA_HIGH)
    put_ok = is_put & (delta >= -DELTA_HIGH) & (delta <= -DELTA_LOW)
    return {
        "traded": frame["volume"] > 0,
        "complete": frame[list(REQUIRED_FIELDS)].notna().all(axis=1)
        & frame["quote_date"].notna() & frame["expiry_date"].notna(),
        "maturity": ttm_days(frame) >= MIN_TTM_DAYS,
        "delta_range": call_ok | put_ok,
    }


def filter_quotes(frame: pd.DataFrame) -> pd.DataFrame:
    """Keep traded, complete quotes with at least 14 days left and |delta| in [0.05, 0.95]."""
    masks = filter_masks(frame)
    keep = np.logical_and.reduce([m.to_numpy(dtype=bool) for m in masks.values()])
    return frame.loc[keep].reset_index(drop=True)


def dominant_filter(frame: pd.DataFrame) -> str:
    """Name of the rule that removes the most rows."""
    masks = filter_masks(frame)
    return max(masks, key=lambda k: int((~masks[k]).sum()))


def assign_bucket(delta: float) -> float:
    """Center of the delta bucket [c-0.05, c+0.05) holding ``delta``."""
    return float(assign_buckets(np.array([delta]))[0])


def assign_buckets(delta: np.ndarray) -> np.ndarray:
    """Vectorized bucket assignment; the outermost edges 0.95 and -0.05 are closed."""
    delta = np.asarray(delta, dtype=np.float64)
    out = np.empty_like(delta)
    pos = delta > 0
    ok_call = pos & (delta >= CALL_EDGES[0]) & (delta <= CALL_EDGES[-1])
    ok_put = ~pos & (delta >= PUT_EDGES[0]) & (delta <= PUT_EDGES[-1])
    if not np.all(ok_call | ok_put):
        bad = delta[~(ok_call | ok_put)][0]
        raise DomainError(f"delta {bad!r} lies outside the filtered ranges")
    ci = np.searchsorted(CALL_EDGES, delta[pos], side="right") - 1
    out[pos] = CALL_CENTERS[np.minimum(ci, len(CALL_CENTERS) - 1)]
    pi = np.searchsorted(PUT_EDGES, delta[~pos], side="right") - 1
    out[~pos] = PUT_CENTERS[np.minimum(pi, len(PUT_CENTERS) - 1)]
    return out


# --------------------------------------------------------------------------
# market context and features


def market_context(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-trading-day index level, VIX and index log-return ln(S_t/S_{t-1}).

    The trading calendar is the sorted set of distinct quote dates.
    """
    daily = (frame.dropna(subset=["quote_date"]).sort_values("quote_date", kind="stable")
             .groupby("quote_date")[["underlying", "vix"]].first())
    daily["log_return"] = np.log(daily["underlying"] / daily["underlying"].shift(1))
    daily["day_index"] = np.arange(len(daily))
    return daily


def build_features(quote: OptionQuote, variant: ModelVariant, context: MarketContext) -> np.ndarray:
    """Raw feature vector of a single quote at its quote date."""
    values = {
        "ttm": quote.ttm_days / DAYS_PER_YEAR,
        "bs_delta": quote.delta,
        "moneyness": quote.underlying / quote.strike,
        "vix": context.vix / 100.0,
        "log_return": context.log_return,
    }
    return np.array([values[n] for n in feature_names(variant, quote.kind)], dtype=np.float64)


def _stack_features(s: SampleSet, names: Sequence[str]) -> np.ndarray:
    cols = {"ttm": s.ttm, "bs_delta": s.bs_delta, "moneyness": s.moneyness,
            "vix": s.vix / 100.0, "log_return": s.log_return}
    if not names:
        return np.empty((len(s), 0))
    return np.column_stack([cols[n] for n in names]).astype(np.float64)


def _quote_columns(frame: pd.DataFrame, market: pd.DataFrame) -> dict[str, np.ndarray]:
    ctx = market.reindex(frame["quote_date"])
    return {
        "ttm": ttm_days(frame).to_numpy(np.float64) / DAYS_PER_YEAR,
        "bs_delta": frame["delta"].to_numpy(np.float64),
        "moneyness": (frame["underlying"] / frame["strike"]).to_numpy(np.float64),
        "vix": frame["vix"].to_numpy(np.float64),
        "log_return": ctx["log_return"].to_numpy(np.float64),
        "day_index": ctx["day_index"].to_numpy(),
    }


def quote_samples(frame: pd.DataFrame, variant: ModelVariant, kind: OptionKind,
                  market: Optional[pd.DataFrame] = None) -> tuple[pd.DataFrame, SampleSet]:
    """Feature rows for the quotes of one kind without requiring a next-day price.

    Used for prediction; the realized changes are NaN. Returns the quote rows
    that produced a sample together with the samples.
    """
    market = market_context(frame) if market is None else market
    sub = frame[frame["cp_flag"] == kind.value].reset_index(drop=True)
    cols = _quote_columns(sub, market)
    nan = np.full(len(sub), np.nan)
    samples = _make_sampleset(sub, cols, nan, nan, kind_sign=np.where(sub["cp_flag"] == "C", 1, -1))
    keep = np.ones(len(sub), dtype=bool)
    if variant is ModelVariant.DNNGRU:
        hist, ok = _histories(cols["day_index"], market, kind)
        samples.history = hist
        keep &= ok
    samples = samples.with_features(variant, kind)
    keep &= np.all(np.isfinite(samples.features), axis=1)
    return sub.loc[keep].reset_index(drop=True), samples.take(np.flatnonzero(keep))


def _make_sampleset(frame: pd.DataFrame, cols: dict, delta_s: np.ndarray, delta_v: np.ndarray,
                    kind_sign: np.ndarray) -> SampleSet:
    return SampleSet(
        features=np.empty((len(frame), 0)),
        delta_s=np.asarray(delta_s, dtype=np.float64),
        delta_v=np.asarray(delta_v, dtype=np.float64),
        bs_delta=cols["bs_delta"],
        bucket=assign_buckets(cols["bs_delta"]) if len(frame) else np.empty(0),
        quote_date=frame["quote_date"].to_numpy("datetime64[D]"),
        kind=np.asarray(kind_sign, dtype=np.int8),
        ttm=cols["ttm"],
        spot=frame["underlying"].to_numpy(np.float64),
        vega=frame["vega"].to_numpy(np.float64),
        strike=frame["strike"].to_numpy(np.float64),
        expiry=frame["expiry_date"].to_numpy("datetime64[D]"),
        moneyness=cols["moneyness"],
        vix=cols["vix"],
        log_return=cols["log_return"],
        day_index=np.nan_to_num(cols["day_index"].astype(np.float64), nan=-1).astype(np.int64),
    )


# --------------------------------------------------------------------------
# pairing and sequences


def pair_consecutive(quotes: pd.DataFrame, variant: ModelVariant,
                     kind: Optional[OptionKind] = None,
                     market: Optional[pd.DataFrame] = None) -> SampleSet:
    """One hedge sample per contract quoted on two consecutive trading days.

    ``market`` (from :func:`market_context`) fixes the trading calendar and
    the index history; by default it is derived from ``quotes`` itself, which
    should then be the unfiltered panel's calendar for exact day adjacency.
    Samples whose features are not finite (e.g. no prior index level for the
    return feature) are skipped.
    """
    market = market_context(quotes) if market is None else market
    frame = quotes if kind is None else quotes[quotes["cp_flag"] == kind.value]
    frame = frame.reset_index(drop=True)
    key = ["expiry_date", "strike", "cp_flag"]
    day = market["day_index"].reindex(frame["quote_date"]).to_numpy()
    base = frame.assign(_day=day, _mid=0.5 * (frame["bid"] + frame["ask"]))
    base = base.dropna(subset=["_day"]).drop_duplicates(subset=key + ["_day"], keep="first")
    nxt = base[key + ["_day", "_mid", "underlying"]].rename(
        columns={"_mid": "_mid_next", "underlying": "_spot_next"})
    nxt = nxt.assign(_day=nxt["_day"] - 1)
    pairs = base.merge(nxt, on=key + ["_day"], how="inner", sort=False)
    pairs = pairs.sort_values(["quote_date", "expiry_date", "strike", "cp_flag"], kind="stable")
    pairs = pairs.reset_index(drop=True)

    cols = _quote_columns(pairs, market)
    samples = _make_sampleset(
        pairs, cols,
        delta_s=(pairs["_spot_next"] - pairs["underlying"]).to_numpy(np.float64),
        delta_v=(pairs["_mid_next"] - pairs["_mid"]).to_numpy(np.float64),
        kind_sign=np.where(pairs["cp_flag"] == "C", 1, -1),
    )
    out = _featurize_mixed(samples, variant, kind)
    ok = np.all(np.isfinite(out.features), axis=1) & np.isfinite(out.delta_s) & np.isfinite(out.delta_v)
    return out.take(np.flatnonzero(ok))


def _featurize_mixed(samples: SampleSet, variant: ModelVariant,
                     kind: Optional[OptionKind]) -> SampleSet:
    if kind is not None:
        return samples.with_features(variant, kind)
    calls = feature_names(variant, OptionKind.CALL)
    puts = feature_names(variant, OptionKind.PUT)
    fc = _stack_features(samples, calls)
    fp = _stack_features(samples, puts)
    feats = np.where((samples.kind > 0)[:, None], fc, fp)
    names = calls if calls == puts else tuple(
        c if c == p else "sentiment" for c, p in zip(calls, puts))
    return replace(samples, features=feats, feature_names=names)


def _histories(day_index: np.ndarray, market: pd.DataFrame, kind: OptionKind):
    series = (market["vix"].to_numpy(np.float64) / 100.0 if kind is OptionKind.CALL
              else market["log_return"].to_numpy(np.float64))
    n = len(day_index)
    hist = np.full((n, SEQUENCE_LENGTH), np.nan)
    idx = np.asarray(day_index, dtype=np.float64)
    ok = np.isfinite(idx) & (idx >= SEQUENCE_LENGTH)
    rows = np.flatnonzero(ok)
    if len(rows):
        start = idx[rows].astype(np.int64) - (SEQUENCE_LENGTH - 1)
        gather = start[:, None] + np.arange(SEQUENCE_LENGTH)[None, :]
        hist[rows] = series[gather]
    ok &= np.all(np.isfinite(hist), axis=1)
    return hist, ok


def build_sequences(quotes: pd.DataFrame, kind: OptionKind,
                    market: Optional[pd.DataFrame] = None) -> SampleSet:
    """Paired samples of one kind with a 22-day sentiment history ending at t.

    Calls carry VIX/100 levels, puts carry index log-returns, oldest first.
    Samples within the first 22 trading days of the calendar are dropped.
    """
    market = market_context(quotes) if market is None else market
    samples = pair_consecutive(quotes, ModelVariant.DNNGRU, kind=kind, market=market)
    hist, ok = _histories(samples.day_index, market, kind)
    out = samples.take(np.flatnonzero(ok))
    out.history = hist[ok]
    return out


# --------------------------------------------------------------------------
# splitting


def split_dataset(samples: SampleSet, test_start: dt.date | str | np.datetime64,
                  val_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Date-suffix test set; the remainder is shuffled into train/validation by ``seed``."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    cutoff = np.datetime64(pd.Timestamp(test_start).date(), "D")
    is_test = samples.quote_date >= cutoff
    rest = np.flatnonzero(~is_test)
    perm = np.random.default_rng(seed).permutation(rest)
    n_val = int(round(val_fraction * len(rest)))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ConfigurationError(
            f"split leaves an empty side (train={len(train_idx)}, validation={len(val_idx)}); "
            "check test_start and val_fraction")
    return DatasetSplit(samples.take(train_idx), samples.take(val_idx),
                        samples.take(np.flatnonzero(is_test)))


def default_test_start(quotes: pd.DataFrame, test_fraction: float = 0.1) -> dt.date:
    """First date of the last ``test_fraction`` of trading days."""
    dates = np.sort(quotes["quote_date"].dropna().unique())
    if len(dates) == 0:
        raise ConfigurationError("quote panel has no dates")
    i = min(len(dates) - 1, int(np.floor(len(dates) * (1.0 - test_fraction))))
    return pd.Timestamp(dates[i]).date()
