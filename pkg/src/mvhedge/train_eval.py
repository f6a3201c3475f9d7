"""Mini-batch training on the hedging-error loss, gain evaluation and hedge-ratio curves."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn_core as nn
from .data_pipeline import (CALL_EDGES, PUT_EDGES, SEQUENCE_LENGTH, DatasetSplit, ModelVariant,
                            SampleSet, assign_buckets)
from .errors import ConfigurationError, DomainError, TrainingDivergedError
from .hedge_models import BsDeltaModel, HwModel, fit_hw
from .market_math import OptionKind, norm_pdf, norm_ppf

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 5e-4
    max_epochs: int = 200
    patience: int = 5
    clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.patience < 1 or self.eval_every < 1:
            raise ConfigurationError("patience and eval_every must be at least 1")
        if self.max_epochs < 0 or self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ConfigurationError("max_epochs >= 0, learning_rate > 0 and clip_norm > 0 required")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    stopped: bool = False


def hedge_loss(predictions: np.ndarray, samples: SampleSet) -> float:
    """Mean squared local hedging error, mean((dV - delta * dS)^2)."""
    pred = np.asarray(predictions, dtype=np.float64)
    if len(samples) == 0:
        raise DomainError("hedge loss of an empty sample set")
    if pred.shape != samples.delta_s.shape:
        raise ValueError("one prediction per sample is required")
    err = samples.delta_v - pred * samples.delta_s
    return float(np.mean(err * err))


def hedge_loss_grad(predictions: np.ndarray, samples: SampleSet) -> np.ndarray:
    err = samples.delta_v - predictions * samples.delta_s
    return -2.0 * err * samples.delta_s / len(samples)


class EarlyStopping:
    """Stop after ``patience`` consecutive checks without a new best loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: Optional[int] = None
        self.bad_checks = 0

    def update(self, loss: float, epoch: int) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_checks = loss, epoch, 0
            return True, False
        self.bad_checks += 1
        return False, self.bad_checks >= self.patience


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one row joins its predecessor."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train(model, split: DatasetSplit, cfg: TrainConfig = TrainConfig()):
    """Fit ``model`` on ``split.train``; returns (model, per-epoch log).

    Hull-White models are fitted by least squares and the BS baseline needs
    no fitting; both return an empty log.
    """
    if isinstance(model, HwModel):
        return fit_hw(split.train, model.kind), []
    if isinstance(model, BsDeltaModel):
        return model, []
    if len(split.train) == 0 or len(split.validation) == 0:
        raise ConfigurationError("training needs non-empty train and validation sets")
    log: list[EpochLog] = []
    if cfg.max_epochs == 0:
        return model, log
    if len(split.train) < 2:
        raise ConfigurationError("need at least 2 training samples per batch")

    model.fit_feature_stats(split.train)
    params = model.parameters()
    adam = nn.AdamState.fresh(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    best_state = model.state_dict()
    val_loss = math.nan

    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for b, idx in enumerate(minibatches(len(split.train), cfg.batch_size, rng)):
            batch = split.train.take(idx)
            pred, backprop = model.forward_train(batch)
            loss = hedge_loss(pred, batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            grads = nn.clip_gradients(backprop(hedge_loss_grad(pred, batch)), cfg.clip_norm)
            nn.adam_step(adam, params, grads)
            total += loss * len(idx)
            count += len(idx)
        train_loss = total / count
        stop = False
        if epoch % cfg.eval_every == 0:
            val_loss = hedge_loss(model.predict(split.validation), split.validation)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(epoch, -1, val_loss)
            improved, stop = stopper.update(val_loss, epoch)
            if improved:
                best_state = model.state_dict()
        log.append(EpochLog(epoch, train_loss, val_loss, stop))
        logger.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if stop:
            break
    if log and not log[-1].stopped:
        log[-1].stopped = True
    model.load_state_dict(best_state)
    return model, log


def write_train_log(log: Sequence[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "stopped"])
        for e in log:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), int(e.stopped)])


# --------------------------------------------------------------------------
# evaluation


@dataclass
class BucketStats:
    n: int
    mse_model: float
    mse_bs: float
    gain: Optional[float]  # None when the baseline error is zero


@dataclass
class EvalReport:
    per_bucket: dict[float, BucketStats]
    overall: BucketStats
    kind: Optional[OptionKind] = None

    def rows(self) -> list[list[str]]:
        def fmt(s: BucketStats):
            return [str(s.n), repr(s.mse_model), repr(s.mse_bs),
                    "undefined" if s.gain is None else repr(s.gain)]
        out = [[f"{b:.1f}"] + fmt(s) for b, s in sorted(self.per_bucket.items())]
        out.append(["overall"] + fmt(self.overall))
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bucket", "n", "mse_model", "mse_bs", "gain"])
            w.writerows(self.rows())


def _gain(mse_model: float, mse_bs: float) -> Optional[float]:
    return 1.0 - mse_model / mse_bs if mse_bs > 0 else None


def evaluate(model, samples: SampleSet, predictions: Optional[np.ndarray] = None) -> EvalReport:
    """Per-delta-bucket and overall hedging MSE of ``model`` against the BS delta."""
    if len(samples) == 0:
        raise DomainError("cannot evaluate on an empty sample set")
    pred = model.predict(samples) if predictions is None else np.asarray(predictions)
    err_m = (samples.delta_v - pred * samples.delta_s) ** 2
    err_b = (samples.delta_v - samples.bs_delta * samples.delta_s) ** 2
    per = {}
    for b in np.unique(samples.bucket):
        m = samples.bucket == b
        mm, mb = float(err_m[m].mean()), float(err_b[m].mean())
        per[float(b)] = BucketStats(int(m.sum()), mm, mb, _gain(mm, mb))
    mm, mb = float(err_m.mean()), float(err_b.mean())
    return EvalReport(per, BucketStats(len(samples), mm, mb, _gain(mm, mb)),
                      kind=getattr(model, "kind", None))


# --------------------------------------------------------------------------
# hedge-ratio curves


def curve_samples(kind: OptionKind, variant: ModelVariant, ttm: float, sentiment,
                  deltas: np.ndarray, vol: float = 0.2, rate: float = 0.0,
                  div_yield: float = 0.0) -> SampleSet:
    """Synthetic samples at fixed TTM and sentiment spanning a grid of BS deltas.

    ``sentiment`` is in feature units: VIX/100 for calls, the index log-return
    for puts; DNN3* takes a (VIX/100, log-return) pair. Moneyness and vega
    follow from inverting the BS delta at volatility ``vol`` (unit spot).
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    n = len(deltas)
    if variant is ModelVariant.DNN3STAR:
        vix_feat, ret = sentiment
    elif kind is OptionKind.CALL:
        vix_feat, ret = sentiment, 0.0
    else:
        vix_feat, ret = vol, sentiment
    d = np.asarray(norm_ppf(deltas if kind is OptionKind.CALL else deltas + 1.0))
    sq = math.sqrt(ttm)
    moneyness = np.exp(d * vol * sq - (rate - div_yield + 0.5 * vol * vol) * ttm)
    vega = math.exp(-div_yield * ttm) * np.asarray(norm_pdf(d)) * sq
    full = np.full(n, 1.0)
    s = SampleSet(
        features=np.empty((n, 0)), delta_s=np.full(n, np.nan), delta_v=np.full(n, np.nan),
        bs_delta=deltas.copy(), bucket=assign_buckets(deltas),
        quote_date=np.full(n, np.datetime64("1970-01-01", "D")),
        kind=np.full(n, kind.sign, dtype=np.int8), ttm=np.full(n, ttm), spot=full,
        vega=vega, strike=1.0 / moneyness, expiry=np.full(n, np.datetime64("1970-01-01", "D")),
        moneyness=moneyness, vix=np.full(n, 100.0 * vix_feat), log_return=np.full(n, ret),
        day_index=np.full(n, -1, dtype=np.int64),
    )
    if variant is ModelVariant.DNNGRU:
        level = vix_feat if kind is OptionKind.CALL else ret
        s.history = np.full((n, SEQUENCE_LENGTH), level)
    return s.with_features(variant, kind)


def hedge_ratio_curve(model, ttm: float, sentiment, delta_grid: Sequence[float],
                      vol: float = 0.2, rate: float = 0.0, div_yield: float = 0.0
                      ) -> list[tuple[float, float]]:
    """(BS delta, predicted hedge ratio) pairs for a fixed TTM and sentiment level."""
    lo, hi = (CALL_EDGES[0], CALL_EDGES[-1]) if model.kind is OptionKind.CALL else (PUT_EDGES[0], PUT_EDGES[-1])
    keep = []
    for x in delta_grid:
        if lo <= x <= hi:
            keep.append(float(x))
        else:
            warnings.warn(f"grid point {x} outside [{lo}, {hi}] skipped", stacklevel=2)
    if not keep:
        return []
    s = curve_samples(model.kind, model.variant, ttm, sentiment, np.array(keep), vol, rate, div_yield)
    pred = model.predict(s)
    return list(zip(keep, (float(p) for p in pred)))


def write_curve(curve: Sequence[tuple[float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bs_delta", "predicted_delta"])
        for x, y in curve:
            w.writerow([repr(x), repr(y)])
