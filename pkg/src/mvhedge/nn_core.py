"""A small deterministic neural-network engine on numpy.

Activations are laid out features x batch (one column per sample), so a dense
layer computes ``W @ h + b[:, None]``. Layers expose ``params()`` (name ->
array, mutated in place by the optimizer), ``forward`` and ``backward``.
All randomness comes from explicitly seeded :class:`numpy.random.Generator`
objects (PCG64); there is no global random state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, ShapeError

TRAIN = "train"
INFER = "infer"

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return expit(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    if name == "relu":
        return da * (z > 0)  # subgradient 0 at the kink
    if name == "sigmoid":
        return da * a * (1.0 - a)
    if name == "tanh":
        return da * (1.0 - a * a)
    return da


class Layer:
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, mode: str):
        raise NotImplementedError

    def backward(self, cache, dy: np.ndarray):
        raise NotImplementedError

    def kink_mask(self, cache) -> Optional[np.ndarray]:
        """Boolean pattern of the piecewise-linear branches taken, if any."""
        return None


class DenseLayer(Layer):
    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "identity"):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ShapeError(f"dense layer needs weights (out, in) and bias (out,), got "
                             f"{weights.shape} and {bias.shape}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, mode):
        z = self.weights @ x + self.bias[:, None]
        a = _activate(self.activation, z)
        return a, (x, z, a)

    def backward(self, cache, dy):
        x, z, a = cache
        dz = _activation_grad(self.activation, z, a, dy)
        grads = {"weights": dz @ x.T, "bias": dz.sum(axis=1)}
        return self.weights.T @ dz, grads

    def kink_mask(self, cache):
        return cache[1] > 0 if self.activation == "relu" else None


class ActivationLayer(Layer):
    def __init__(self, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def forward(self, x, mode):
        a = _activate(self.activation, x)
        return a, (x, a)

    def backward(self, cache, dy):
        x, a = cache
        return _activation_grad(self.activation, x, a, dy), {}

    def kink_mask(self, cache):
        return cache[0] > 0 if self.activation == "relu" else None


class BatchNormLayer(Layer):
    """Per-feature standardization over the batch, then scale and shift."""

    def __init__(self, size: int, momentum: float = 0.9, epsilon: float = 1e-5):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.gamma = np.ones(size)
        self.beta = np.zeros(size)
        self.running_mean = np.zeros(size)
        self.running_var = np.ones(size)
        self.momentum = momentum
        self.epsilon = epsilon

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, mode):
        if mode == TRAIN:
            n = x.shape[1]
            if n < 2:
                raise ContractViolation("batch normalization in train mode needs a batch of at least 2")
            mean = x.mean(axis=1)
            var = x.var(axis=1)
            m = self.momentum
            self.running_mean *= m
            self.running_mean += (1.0 - m) * mean
            self.running_var *= m
            self.running_var += (1.0 - m) * var * (n / (n - 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean[:, None]) * inv_std[:, None]
        y = self.gamma[:, None] * xhat + self.beta[:, None]
        return y, (xhat, inv_std)

    def backward(self, cache, dy):
        xhat, inv_std = cache
        n = dy.shape[1]
        dgamma = (dy * xhat).sum(axis=1)
        dbeta = dy.sum(axis=1)
        dxhat = dy * self.gamma[:, None]
        dx = (inv_std[:, None] / n) * (
            n * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, {"gamma": dgamma, "beta": dbeta}


class OutputClamp(Layer):
    """max(x, 0) for sign=+1 (calls) and min(x, 0) for sign=-1 (puts)."""

    def __init__(self, sign: int):
        if sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        self.sign = sign

    def forward(self, x, mode):
        active = self.sign * x > 0  # gradient is 0 at exactly 0
        return np.where(active, x, 0.0), active

    def backward(self, cache, dy):
        return dy * cache, {}

    def kink_mask(self, cache):
        return cache


class SigmoidOutput(Layer):
    """sigmoid(x) for calls, sigmoid(x) - 1 for puts."""

    def __init__(self, sign: int):
        self.sign = sign

    def forward(self, x, mode):
        s = expit(x)
        return (s if self.sign > 0 else s - 1.0), s

    def backward(self, cache, dy):
        return dy * cache * (1.0 - cache), {}


def xavier_init(fan_in: int, fan_out: int, seed, activation: str = "identity") -> DenseLayer:
    """Dense layer with weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)] and zero biases."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be positive")
    bound = 1.0 / math.sqrt(fan_in)
    w = _rng(seed).uniform(-bound, bound, size=(fan_out, fan_in))
    return DenseLayer(w, np.zeros(fan_out), activation)


# --------------------------------------------------------------------------
# network-level forward / backward


@dataclass
class ForwardCache:
    layer_ids: tuple[int, ...]
    mode: str
    entries: list
    consumed: bool = False

    def kink_signature(self, network: Sequence[Layer]) -> bytes:
        parts = []
        for layer, entry in zip(network, self.entries):
            mask = layer.kink_mask(entry)
            if mask is not None:
                parts.append(np.packbits(np.asarray(mask, dtype=bool)).tobytes())
        return b"".join(parts)


@dataclass
class Gradients:
    layers: list[dict[str, np.ndarray]]
    input: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [g for d in self.layers for g in d.values()]


def forward(network: Sequence[Layer], x: np.ndarray, mode: str = INFER):
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}")
    h = np.asarray(x, dtype=np.float64)
    entries = []
    for i, layer in enumerate(network):
        if isinstance(layer, DenseLayer) and h.shape[0] != layer.fan_in:
            raise ShapeError(f"layer {i}: expected {layer.fan_in} input rows, got {h.shape[0]}")
        h, entry = layer.forward(h, mode)
        entries.append(entry)
    return h, ForwardCache(tuple(id(l) for l in network), mode, entries)


def backward(network: Sequence[Layer], cache: ForwardCache, loss_grad: np.ndarray) -> Gradients:
    """Reverse-mode gradients of every parameter, given dLoss/dOutput."""
    if cache.consumed or cache.layer_ids != tuple(id(l) for l in network):
        raise ContractViolation("stale forward cache: run forward again before backward")
    if cache.mode != TRAIN:
        raise ContractViolation("backward requires a train-mode forward cache")
    cache.consumed = True
    grads: list[dict] = [None] * len(network)  # type: ignore[list-item]
    d = np.asarray(loss_grad, dtype=np.float64)
    for i in range(len(network) - 1, -1, -1):
        d, grads[i] = network[i].backward(cache.entries[i], d)
    return Gradients(grads, d)


def parameters(network: Sequence[Layer]) -> list[np.ndarray]:
    return [p for layer in network for p in layer.params().values()]


# --------------------------------------------------------------------------
# GRU


class GruCell:
    """Gated recurrent unit with update gate z, reset gate r and candidate state.

    z = sigmoid(W_z x + U_z h + b_z); r = sigmoid(W_r x + U_r h + b_r);
    cand = tanh(W_h x + U_h (r * h) + b_h); h' = (1 - z) * h + z * cand.
    """

    names = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")

    def __init__(self, input_size: int, hidden_size: int, seed=None):
        self.input_size = input_size
        self.hidden_size = hidden_size
        rng = _rng(seed)
        bx = 1.0 / math.sqrt(input_size)
        bh = 1.0 / math.sqrt(hidden_size)
        self.p: dict[str, np.ndarray] = {}
        for g in "zrh":
            self.p[f"W_{g}"] = rng.uniform(-bx, bx, size=(hidden_size, input_size))
            self.p[f"U_{g}"] = rng.uniform(-bh, bh, size=(hidden_size, hidden_size))
            self.p[f"b_{g}"] = np.zeros(hidden_size)

    def params(self) -> dict[str, np.ndarray]:
        return {k: self.p[k] for k in self.names}

    def step(self, x_t: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
        """One cell update; vectors or (size, batch) matrices."""
        x = np.asarray(x_t, dtype=np.float64)
        h = np.asarray(h_prev, dtype=np.float64)
        squeeze = h.ndim == 1
        if squeeze:
            x, h = x.reshape(-1, 1), h.reshape(-1, 1)
        h_new = self._step(x, h)[0]
        return h_new[:, 0] if squeeze else h_new

    def _step(self, x, h):
        p = self.p
        z = expit(p["W_z"] @ x + p["U_z"] @ h + p["b_z"][:, None])
        r = expit(p["W_r"] @ x + p["U_r"] @ h + p["b_r"][:, None])
        rh = r * h
        cand = np.tanh(p["W_h"] @ x + p["U_h"] @ rh + p["b_h"][:, None])
        h_new = (1.0 - z) * h + z * cand
        return h_new, (x, h, z, r, rh, cand)

    def forward_sequence(self, xs: np.ndarray, h0: Optional[np.ndarray] = None):
        """Roll over xs of shape (T, input_size, batch); returns final state and cache."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[1] != self.input_size:
            raise ShapeError(f"sequence must be (T, {self.input_size}, batch), got {xs.shape}")
        h = np.zeros((self.hidden_size, xs.shape[2])) if h0 is None else h0
        steps = []
        for t in range(xs.shape[0]):
            h, c = self._step(xs[t], h)
            steps.append(c)
        return h, steps

    def backward_sequence(self, steps, dh: np.ndarray):
        p = self.p
        g = {k: np.zeros_like(v) for k, v in p.items()}
        dxs = []
        for x, h, z, r, rh, cand in reversed(steps):
            dz = dh * (cand - h)
            dcand = dh * z
            dh_prev = dh * (1.0 - z)
            da_h = dcand * (1.0 - cand * cand)
            g["W_h"] += da_h @ x.T
            g["U_h"] += da_h @ rh.T
            g["b_h"] += da_h.sum(axis=1)
            drh = p["U_h"].T @ da_h
            dr = drh * h
            dh_prev += drh * r
            da_r = dr * r * (1.0 - r)
            g["W_r"] += da_r @ x.T
            g["U_r"] += da_r @ h.T
            g["b_r"] += da_r.sum(axis=1)
            dh_prev += p["U_r"].T @ da_r
            da_z = dz * z * (1.0 - z)
            g["W_z"] += da_z @ x.T
            g["U_z"] += da_z @ h.T
            g["b_z"] += da_z.sum(axis=1)
            dh_prev += p["U_z"].T @ da_z
            dxs.append(p["W_z"].T @ da_z + p["W_r"].T @ da_r + p["W_h"].T @ da_h)
            dh = dh_prev
        return {k: g[k] for k in self.names}, dh, np.stack(dxs[::-1])


# --------------------------------------------------------------------------
# optimization


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(a, a)) for a in arrays))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale all gradients together when their global L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray], lr: float = 5e-4, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and moment lists must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple = field(default=())


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(loss_fn: Callable[[], tuple[float, bytes]], params: Sequence[np.ndarray],
                   analytic: Sequence[np.ndarray], seed, coords_per_param: int = 20,
                   step: float = 1e-5, floor: float = 1e-6) -> GradCheckResult:
    """Compare analytic gradients with central differences on sampled coordinates.

    ``loss_fn`` re-evaluates the loss at the current parameter values and
    returns it together with a signature of the piecewise-linear branches
    taken. A coordinate whose +/- step changes that signature straddles a
    kink and is skipped in favour of another draw.

    ``floor`` is the smallest denominator of the relative error, in units of
    max(1, |loss|): gradients carry the loss's units, so the floor must too
    for the verdict to be invariant to rescaling the loss.
    """
    rng = _rng(seed)
    base_loss, base_sig = loss_fn()
    floor = floor * max(1.0, abs(base_loss))
    worst = 0.0
    where: tuple = ()
    checked = skipped = 0
    for pi, (p, g) in enumerate(zip(params, analytic)):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        want = min(coords_per_param, flat.size)
        order = rng.permutation(flat.size)
        got = 0
        for j in order:
            if got >= want:
                break
            orig = flat[j]
            flat[j] = orig + step
            lp, sp = loss_fn()
            flat[j] = orig - step
            lm, sm = loss_fn()
            flat[j] = orig
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            fd = (lp - lm) / (2.0 * step)
            err = float(relative_error(gflat[j], fd, floor))
            if err > worst:
                worst, where = err, (pi, int(j), float(gflat[j]), fd)
            got += 1
            checked += 1
    return GradCheckResult(worst, checked, skipped, where)
