"""Synthetic index-option quote panels in a log-OU stochastic-volatility world.

Quotes are Black-Scholes prices at the day's instantaneous volatility, so the
variance-minimizing hedge ratio differs from the Black-Scholes delta exactly
through the spot/volatility correlation. :func:`local_ols_oracle` recovers it
by brute force from realized hedge samples.
"""
from __future__ import annotations

import datetime as dt
import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
import pandas as pd

from . import market_math as mm
from .data_pipeline import QUOTE_COLUMNS, SampleSet
from .errors import ConfigurationError
from .market_math import OptionKind, PricingInputs

TRADING_DAYS_PER_YEAR = 252


def _default_strikes() -> list[float]:
    return [round(0.85 + 0.025 * i, 3) for i in range(13)]


@dataclass
class GeneratorConfig:
    n_days: int = 2520
    spot0: float = 2000.0
    vol0: float = 0.2
    long_vol: float = 0.2
    mean_rev: float = 3.0
    vol_of_vol: float = 1.0
    corr: float = -0.7
    rate: float = 0.02
    div_yield: float = 0.015
    strike_grid: list[float] = field(default_factory=_default_strikes)
    maturity_grid: list[int] = field(default_factory=lambda: [30, 60, 91, 182])
    seed: int = 42
    start_date: dt.date = dt.date(2010, 1, 4)
    roll_every: int = 10  # trading days between contract listings

    def __post_init__(self) -> None:
        if self.n_days < 23:
            raise ConfigurationError("n_days must be at least 23")
        if self.vol0 <= 0 or self.long_vol <= 0 or self.vol_of_vol < 0:
            raise ConfigurationError("vol0 and long_vol must be > 0, vol_of_vol >= 0")
        if abs(self.corr) > 1:
            raise ConfigurationError("corr must lie in [-1, 1]")
        if self.spot0 <= 0 or self.roll_every < 1:
            raise ConfigurationError("spot0 must be > 0 and roll_every >= 1")
        if not self.strike_grid or not self.maturity_grid:
            raise ConfigurationError("strike and maturity grids must be non-empty")

    @classmethod
    def constant_vol(cls, **overrides) -> "GeneratorConfig":
        """The null world: volatility pinned at its long-run level."""
        base = dict(vol_of_vol=0.0, vol0=0.2, long_vol=0.2)
        base.update(overrides)
        return cls(**base)


@dataclass
class MarketPath:
    dates: list[dt.date]
    spots: np.ndarray
    vols: np.ndarray
    shocks: np.ndarray  # (n_days-1, 2): spot and vol standard-normal draws

    @property
    def vix_proxy(self) -> np.ndarray:
        return 100.0 * self.vols


def trading_dates(start: dt.date, n: int) -> list[dt.date]:
    return [d.date() for d in pd.bdate_range(start=start, periods=n)]


def simulate_path(cfg: GeneratorConfig) -> MarketPath:
    """Euler scheme in log space with correlated spot and volatility shocks."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_days
    dt_ = 1.0 / TRADING_DAYS_PER_YEAR
    z = rng.standard_normal((n - 1, 2))
    eps_s = z[:, 0]
    eps_v = cfg.corr * z[:, 0] + math.sqrt(max(0.0, 1.0 - cfg.corr ** 2)) * z[:, 1]
    log_s = np.empty(n)
    log_v = np.empty(n)
    log_s[0] = math.log(cfg.spot0)
    log_v[0] = math.log(cfg.vol0)
    log_bar = math.log(cfg.long_vol)
    sq = math.sqrt(dt_)
    for t in range(n - 1):
        sig = math.exp(log_v[t])
        log_v[t + 1] = log_v[t] + cfg.mean_rev * (log_bar - log_v[t]) * dt_ + cfg.vol_of_vol * sq * eps_v[t]
        log_s[t + 1] = log_s[t] + (cfg.rate - cfg.div_yield - 0.5 * sig * sig) * dt_ + sig * sq * eps_s[t]
    return MarketPath(dates=trading_dates(cfg.start_date, n), spots=np.exp(log_s),
                      vols=np.exp(log_v), shocks=np.column_stack([eps_s, eps_v]))


def generate_quote_panel(cfg: GeneratorConfig, path: MarketPath | None = None) -> pd.DataFrame:
    """Daily call and put quotes on a rolling grid of listed contracts.

    Every ``roll_every`` trading days a fresh set of contracts is listed with
    strikes round(m * S) and expiries ``listing date + maturity``; they are
    quoted each day until the next listing, so consecutive-day pairs exist
    except across a roll. Rows are ordered by (date, expiry, strike, kind).
    """
    path = simulate_path(cfg) if path is None else path
    n = cfg.n_days
    listing = (np.arange(n) // cfg.roll_every) * cfg.roll_every
    dates = np.array(path.dates, dtype="datetime64[D]")
    m = np.asarray(cfg.strike_grid, dtype=np.float64)
    mats = np.asarray(cfg.maturity_grid, dtype=np.int64)

    day = np.repeat(np.arange(n), len(mats) * len(m))
    mat = np.tile(np.repeat(mats, len(m)), n)
    mny = np.tile(m, n * len(mats))
    list_day = listing[day]
    strike = np.round(mny * path.spots[list_day])
    expiry = dates[list_day] + mat.astype("timedelta64[D]")
    qdate = dates[day]
    ttm_d = (expiry - qdate).astype(np.int64)

    frames = []
    for kind in (OptionKind.CALL, OptionKind.PUT):
        frames.append(_quote_block(cfg, path, day, qdate, expiry, strike, ttm_d, kind))
    panel = pd.concat(frames, ignore_index=True)
    panel = panel.sort_values(["quote_date", "expiry_date", "strike", "cp_flag"], kind="stable")
    return panel.reset_index(drop=True)[list(QUOTE_COLUMNS)]


def _quote_block(cfg, path, day, qdate, expiry, strike, ttm_d, kind):
    live = ttm_d > 0
    day, qdate, expiry, strike, ttm_d = day[live], qdate[live], expiry[live], strike[live], ttm_d[live]
    spot = path.spots[day]
    vol = path.vols[day]
    p = PricingInputs(spot=spot, strike=strike, rate=np.full_like(spot, cfg.rate),
                      div_yield=np.full_like(spot, cfg.div_yield), vol=vol, ttm=ttm_d / 365.0)
    price = np.asarray(mm.bs_price(p, kind))
    return pd.DataFrame({
        "quote_date": pd.to_datetime(qdate),
        "expiry_date": pd.to_datetime(expiry),
        "cp_flag": kind.value,
        "strike": strike,
        "bid": price,
        "ask": price,
        "volume": np.ones_like(price),
        "implied_vol": vol,
        "delta": np.asarray(mm.bs_delta(p, kind)),
        "gamma": np.asarray(mm.bs_gamma(p)),
        "vega": np.asarray(mm.bs_vega(p)),
        "theta": np.asarray(mm.bs_theta(p, kind)),
        "underlying": spot,
        "vix": 100.0 * vol,
        "rate": cfg.rate,
        "div_yield": cfg.div_yield,
    })


def ttm_delta_cells(samples: SampleSet, ttm_edges_days: Sequence[float] = (14, 45, 75, 120, 200)
                    ) -> list[tuple[int, float]]:
    """Cell key per sample: (index of the ttm bin, delta bucket center)."""
    days = samples.ttm * 365.0
    tb = np.searchsorted(np.asarray(ttm_edges_days, dtype=np.float64), days, side="right") - 1
    return list(zip(tb.tolist(), samples.bucket.tolist()))


def local_ols_oracle(samples: SampleSet, cells: Sequence[Hashable],
                     min_samples: int = 30) -> dict[Hashable, float]:
    """Per-cell constant hedge ratio minimizing sum (dV - h dS)^2, i.e. sum dV dS / sum dS^2.

    Cells with fewer than ``min_samples`` samples or no spot movement are
    omitted with a warning.
    """
    keys = list(cells)
    if len(keys) != len(samples):
        raise ValueError("one cell key per sample is required")
    groups: dict[Hashable, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    out: dict[Hashable, float] = {}
    for k, idx in groups.items():
        ds = samples.delta_s[idx]
        dv = samples.delta_v[idx]
        denom = float(np.dot(ds, ds))
        if len(idx) < min_samples or denom == 0.0:
            warnings.warn(f"cell {k!r} omitted: n={len(idx)}, sum dS^2={denom}", stacklevel=2)
            continue
        out[k] = float(np.dot(dv, ds)) / denom
    return out
