"""Hedge-ratio models: feedforward variants, GRU + linear head, Hull-White, BS delta.

Trainable models share a small duck-typed surface used by the training loop:
``parameters()``, ``fit_feature_stats(samples)``, ``forward_train(batch)``
(returning predictions and a closure mapping dLoss/dPrediction to parameter
gradients), ``predict(samples)`` and ``state_dict()/load_state_dict()``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import nn_core as nn
from .data_pipeline import SEQUENCE_LENGTH, ModelVariant, SampleSet, SequenceWindow, feature_names
from .errors import ContractViolation, KindMismatchError, SingularDesignError
from .market_math import HwCoefficients, OptionKind, hw_delta_from_greeks

__all__ = [
    "ModelVariant", "FeatureStats", "FnnHedgeModel", "GruHedgeModel", "HwModel", "BsDeltaModel",
    "output_clamp", "fnn_predict", "gru_cell_step", "gru_predict", "fit_hw", "build_model",
]

FNN_VARIANTS = (ModelVariant.DNN2, ModelVariant.DNN3, ModelVariant.DNN2PLUS,
                ModelVariant.DNN3PLUS, ModelVariant.DNN3STAR)

# Regressor matrices whose R factor is worse conditioned than this are rejected.
MAX_DESIGN_CONDITION = 1e12


def output_clamp(raw, kind: OptionKind):
    """Calls: max(raw, 0); puts: min(raw, 0)."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.maximum(raw, 0.0) if kind is OptionKind.CALL else np.minimum(raw, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "FeatureStats":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def _kind_of(samples: SampleSet) -> Optional[OptionKind]:
    if len(samples) == 0:
        return None
    signs = np.unique(samples.kind)
    if len(signs) != 1:
        return None
    return OptionKind.CALL if signs[0] > 0 else OptionKind.PUT


def _check_kind(model, samples: SampleSet) -> None:
    k = _kind_of(samples)
    if len(samples) and k is not model.kind:
        raise KindMismatchError(f"{model.kind.name.lower()} model given samples of another kind")


class FnnHedgeModel:
    """Feedforward hedge ratio: [dense -> batch norm -> ReLU] x depth, dense, sign clamp."""

    def __init__(self, kind: OptionKind, variant: ModelVariant = ModelVariant.DNN3,
                 hidden: Sequence[int] = (128, 128, 128), seed: int = 0,
                 output: str = "clamp", batch_norm: bool = True,
                 n_features: Optional[int] = None):
        if variant not in FNN_VARIANTS and n_features is None:
            raise ValueError(f"{variant} is not a feedforward variant")
        if output not in ("clamp", "sigmoid"):
            raise ValueError("output must be 'clamp' or 'sigmoid'")
        self.kind = kind
        self.variant = variant
        self.feature_names = feature_names(variant, kind) if n_features is None else tuple(
            f"x{i}" for i in range(n_features))
        self._anonymous = n_features is not None
        self.hidden = tuple(hidden)
        self.output = output
        self.batch_norm = batch_norm
        n_in = len(self.feature_names)
        children = np.random.SeedSequence(seed).spawn(len(self.hidden) + 1)
        layers: list[nn.Layer] = []
        width = n_in
        for h, child in zip(self.hidden, children):
            if batch_norm:
                layers += [nn.xavier_init(width, h, np.random.default_rng(child)),
                           nn.BatchNormLayer(h), nn.ActivationLayer("relu")]
            else:
                layers.append(nn.xavier_init(width, h, np.random.default_rng(child), "relu"))
            width = h
        layers.append(nn.xavier_init(width, 1, np.random.default_rng(children[-1])))
        layers.append(nn.OutputClamp(kind.sign) if output == "clamp" else nn.SigmoidOutput(kind.sign))
        self.layers = layers
        self.stats = FeatureStats.identity(n_in)

    def parameters(self) -> list[np.ndarray]:
        return nn.parameters(self.layers)

    def buffers(self) -> list[np.ndarray]:
        return [b for l in self.layers if isinstance(l, nn.BatchNormLayer) for b in l.buffers().values()]

    def fit_feature_stats(self, samples: SampleSet) -> None:
        self.stats = FeatureStats.fit(self._raw(samples))

    def _raw(self, samples: SampleSet) -> np.ndarray:
        named = bool(samples.feature_names) and not self._anonymous
        if samples.features.shape[1] != len(self.feature_names) or (
                named and tuple(samples.feature_names) != self.feature_names):
            raise ContractViolation(
                f"feature layout {samples.feature_names} does not match model {self.feature_names}")
        return samples.features

    def predict_features(self, x_raw: np.ndarray) -> np.ndarray:
        x = self.stats.apply(np.asarray(x_raw, dtype=np.float64)).T
        out, _ = nn.forward(self.layers, x, nn.INFER)
        return out[0]

    def predict(self, samples: SampleSet) -> np.ndarray:
        _check_kind(self, samples)
        return self.predict_features(self._raw(samples))

    def forward_train(self, batch: SampleSet):
        x = self.stats.apply(self._raw(batch)).T
        out, cache = nn.forward(self.layers, x, nn.TRAIN)

        def backprop(dpred: np.ndarray) -> list[np.ndarray]:
            return nn.backward(self.layers, cache, dpred[None, :]).arrays()

        backprop.kink_signature = lambda: cache.kink_signature(self.layers)
        return out[0], backprop

    def state_dict(self) -> list[np.ndarray]:
        return [a.copy() for a in self.parameters() + self.buffers()]

    def load_state_dict(self, state: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.parameters() + self.buffers(), state):
            dst[...] = src


def fnn_predict(model: FnnHedgeModel, samples: SampleSet) -> np.ndarray:
    return model.predict(samples)


class GruHedgeModel:
    """GRU over the 22-day sentiment history; its final state joins (TTM, BS delta) in a linear head."""

    def __init__(self, kind: OptionKind, hidden_size: int = 8, seed: int = 0, output: str = "clamp"):
        self.kind = kind
        self.variant = ModelVariant.DNNGRU
        self.feature_names = feature_names(ModelVariant.DNNGRU, kind)
        self.hidden_size = hidden_size
        self.output = output
        s_gru, s_head = np.random.SeedSequence(seed).spawn(2)
        self.gru = nn.GruCell(1, hidden_size, np.random.default_rng(s_gru))
        n_head = hidden_size + len(self.feature_names)
        self.head = [nn.xavier_init(n_head, 1, np.random.default_rng(s_head)),
                     nn.OutputClamp(kind.sign) if output == "clamp" else nn.SigmoidOutput(kind.sign)]
        self.stats = FeatureStats.identity(len(self.feature_names))
        self.history_stats = FeatureStats.identity(1)

    def parameters(self) -> list[np.ndarray]:
        return list(self.gru.params().values()) + nn.parameters(self.head)

    def buffers(self) -> list[np.ndarray]:
        return []

    def fit_feature_stats(self, samples: SampleSet) -> None:
        self.stats = FeatureStats.fit(samples.features)
        self.history_stats = FeatureStats.fit(samples.history.reshape(-1))

    def _inputs(self, history: np.ndarray, contract: np.ndarray):
        history = np.asarray(history, dtype=np.float64)
        if history.ndim != 2 or history.shape[1] != SEQUENCE_LENGTH:
            raise ContractViolation(f"history must have length {SEQUENCE_LENGTH}")
        xs = ((history - self.history_stats.mean[0]) / self.history_stats.std[0]).T[:, None, :]
        return xs, self.stats.apply(np.asarray(contract, dtype=np.float64)).T

    def predict_arrays(self, history: np.ndarray, contract: np.ndarray) -> np.ndarray:
        xs, c = self._inputs(history, contract)
        h, _ = self.gru.forward_sequence(xs)
        out, _ = nn.forward(self.head, np.vstack([h, c]), nn.INFER)
        return out[0]

    def predict(self, samples: SampleSet) -> np.ndarray:
        _check_kind(self, samples)
        if samples.history is None:
            raise ContractViolation("GRU model needs samples carrying a sequence history")
        return self.predict_arrays(samples.history, samples.features)

    def forward_train(self, batch: SampleSet):
        xs, c = self._inputs(batch.history, batch.features)
        h, steps = self.gru.forward_sequence(xs)
        out, cache = nn.forward(self.head, np.vstack([h, c]), nn.TRAIN)

        def backprop(dpred: np.ndarray) -> list[np.ndarray]:
            g = nn.backward(self.head, cache, dpred[None, :])
            gru_grads, _, _ = self.gru.backward_sequence(steps, g.input[: self.hidden_size])
            return list(gru_grads.values()) + g.arrays()

        backprop.kink_signature = lambda: cache.kink_signature(self.head)
        return out[0], backprop

    def state_dict(self) -> list[np.ndarray]:
        return [a.copy() for a in self.parameters()]

    def load_state_dict(self, state: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.parameters(), state):
            dst[...] = src


def gru_cell_step(model: GruHedgeModel, x_t, h_prev) -> np.ndarray:
    return model.gru.step(np.atleast_1d(np.asarray(x_t, dtype=np.float64)), h_prev)


def gru_predict(model: GruHedgeModel, windows: Sequence[SequenceWindow]) -> np.ndarray:
    """Predictions for explicit windows; contract features are raw (standardized inside)."""
    windows = list(windows)
    for w in windows:
        if len(w.history) != SEQUENCE_LENGTH:
            raise ContractViolation(f"history must have length {SEQUENCE_LENGTH}")
    hist = np.array([w.history for w in windows], dtype=np.float64).reshape(len(windows), -1)
    contract = np.array([w.contract_features for w in windows], dtype=np.float64)
    return model.predict_arrays(hist, contract.reshape(len(windows), -1))


@dataclass
class HwModel:
    kind: OptionKind
    coef: HwCoefficients
    variant: ModelVariant = ModelVariant.HW
    condition: float = float("nan")

    def predict(self, samples: SampleSet) -> np.ndarray:
        _check_kind(self, samples)
        return np.asarray(hw_delta_from_greeks(samples.bs_delta, samples.vega, samples.spot,
                                               samples.ttm, self.coef), dtype=np.float64)


@dataclass
class BsDeltaModel:
    """The practitioner baseline: hedge with the Black-Scholes delta itself."""

    kind: OptionKind
    variant: ModelVariant = ModelVariant.BS

    def predict(self, samples: SampleSet) -> np.ndarray:
        _check_kind(self, samples)
        return np.array(samples.bs_delta, dtype=np.float64)


def hw_design(samples: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Regressors dS * vega/(S sqrt(tau)) * (1, d, d^2) and target dV - d dS."""
    d = samples.bs_delta
    scale = samples.delta_s * samples.vega / (samples.spot * np.sqrt(samples.ttm))
    x = np.column_stack([scale, scale * d, scale * d * d])
    y = samples.delta_v - d * samples.delta_s
    return x, y


def fit_hw(samples: SampleSet, kind: Optional[OptionKind] = None) -> HwModel:
    """Least-squares Hull-White coefficients via a Householder QR of the design."""
    if len(samples) < 3:
        raise SingularDesignError("need at least 3 samples", float("inf"))
    kind = kind if kind is not None else (_kind_of(samples) or OptionKind.CALL)
    x, y = hw_design(samples)
    q, r = np.linalg.qr(x, mode="reduced")
    diag = np.abs(np.diag(r))
    cond = float(np.linalg.cond(r)) if diag.min() > 0 else float("inf")
    if not np.isfinite(cond) or cond > MAX_DESIGN_CONDITION:
        raise SingularDesignError("rank-deficient Hull-White design", cond)
    a, b, c = solve_triangular(r, q.T @ y)
    return HwModel(kind, HwCoefficients(float(a), float(b), float(c)), condition=cond)


def build_model(variant: ModelVariant, kind: OptionKind, seed: int = 0, **kw):
    """Fresh, untrained model for a variant."""
    if variant in FNN_VARIANTS:
        return FnnHedgeModel(kind, variant, seed=seed, **kw)
    if variant is ModelVariant.DNNGRU:
        return GruHedgeModel(kind, seed=seed, **kw)
    if variant is ModelVariant.HW:
        return HwModel(kind, HwCoefficients(0.0, 0.0, 0.0))
    return BsDeltaModel(kind)


def clone(model):
    return copy.deepcopy(model)
