import datetime as dt

import numpy as np
import pandas as pd
import pytest

from mvhedge.data_pipeline import OptionQuote, quotes_to_frame
from mvhedge.market_math import OptionKind


def make_quote(day: dt.date, kind=OptionKind.CALL, strike=3000.0, expiry=None, mid=10.0,
               delta=0.5, underlying=3000.0, vix=16.0, **overrides) -> OptionQuote:
    expiry = expiry or dt.date(2020, 6, 19)
    fields = dict(quote_date=day, expiry_date=expiry, kind=kind, strike=strike, bid=mid, ask=mid,
                  volume=1.0, implied_vol=0.2, delta=delta, gamma=0.001, vega=300.0,
                  theta=-100.0, underlying=underlying, vix=vix, rate=0.02, div_yield=0.015)
    fields.update(overrides)
    return OptionQuote(**fields)


@pytest.fixture
def make_frame():
    def build(quotes):
        return quotes_to_frame(list(quotes))
    return build


def business_days(n: int, start=dt.date(2020, 1, 6)) -> list[dt.date]:
    return [d.date() for d in pd.bdate_range(start, periods=n)]


def make_samples(delta_s, delta_v, bs_delta=None, ttm=None, kind=OptionKind.CALL):
    """Bare SampleSet from hedge arrays; remaining columns get plausible constants."""
    from mvhedge.data_pipeline import SampleSet, assign_buckets

    delta_s = np.asarray(delta_s, dtype=np.float64)
    n = len(delta_s)
    bs_delta = np.full(n, 0.5 * kind.sign) if bs_delta is None else np.asarray(bs_delta, dtype=np.float64)
    ttm = np.full(n, 60 / 365) if ttm is None else np.asarray(ttm, dtype=np.float64)
    day = np.datetime64("2020-01-06", "D")
    return SampleSet(
        features=np.column_stack([ttm, bs_delta]), delta_s=delta_s,
        delta_v=np.asarray(delta_v, dtype=np.float64), bs_delta=bs_delta,
        bucket=assign_buckets(bs_delta) if n else np.empty(0),
        quote_date=np.full(n, day), kind=np.full(n, kind.sign, dtype=np.int8), ttm=ttm,
        spot=np.full(n, 3000.0), vega=np.full(n, 300.0), strike=np.full(n, 3000.0),
        expiry=np.full(n, day + 60), moneyness=np.ones(n), vix=np.full(n, 16.0),
        log_return=np.zeros(n), day_index=np.arange(n, dtype=np.int64),
        feature_names=("ttm", "bs_delta"),
    )


def hw_world(n: int, coef=(0.02, -0.05, 0.03), snr=None, seed=0, kind=OptionKind.CALL):
    """Samples whose price changes follow the Hull-White hedge ratio exactly.

    With ``snr`` set, Gaussian noise is added to dV with variance equal to the
    variance of the Hull-White correction signal divided by ``snr``.
    """
    from mvhedge.market_math import norm_pdf, norm_ppf

    rng = np.random.default_rng(seed)
    spot = 3000.0
    delta = rng.uniform(0.05, 0.95, n)
    if kind is OptionKind.PUT:
        delta = delta - 1.0
    ttm = rng.uniform(14, 200, n) / 365.0
    d = norm_ppf(delta + (1.0 if kind is OptionKind.PUT else 0.0))
    vega = spot * norm_pdf(d) * np.sqrt(ttm)
    ds = rng.normal(0.0, spot * 0.2 / np.sqrt(252), n)
    a, b, c = coef
    signal = ds * vega / (spot * np.sqrt(ttm)) * (a + b * delta + c * delta**2)
    dv = delta * ds + signal
    if snr is not None:
        dv = dv + rng.normal(0.0, np.sqrt(signal.var() / snr), n)
    s = make_samples(ds, dv, bs_delta=delta, ttm=ttm, kind=kind)
    s.vega = vega
    s.spot = np.full(n, spot)
    return s
