"""Binary checkpoint container for every hedge model.

Layout (all integers little-endian)::

    b"MVHG"  u8 version=1
    u32 n_entries, then n_entries x (u32 len, key UTF-8, u32 len, value UTF-8)
    u64 n_params, then n_params x f64   (parameters in model layer order)
    u64 checksum  (first 8 bytes of BLAKE2b over everything after the version byte)

Metadata values are JSON text; Python float reprs round-trip exactly, so
stored running statistics and standardization constants are bit-preserved.
Parameter order: FNN layers front to back, each dense layer as weights
(row-major, out x in) then bias, each batch norm as gamma then beta; GRU
models store W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h then the head
weights and bias; Hull-White models store (a, b, c); the BS baseline none.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import nn_core as nn
from .data_pipeline import ModelVariant
from .errors import CheckpointFormatError, KindMismatchError
from .hedge_models import BsDeltaModel, FeatureStats, FnnHedgeModel, GruHedgeModel, HwModel
from .market_math import HwCoefficients, OptionKind

MAGIC = b"MVHG"
VERSION = 1


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _describe(model) -> tuple[dict[str, str], list[np.ndarray]]:
    meta = {
        "format_writer": f"mvhedge {__version__}",
        "variant": model.variant.value,
        "kind": model.kind.value,
    }
    if isinstance(model, FnnHedgeModel):
        layers = []
        running = []
        for layer in model.layers:
            if isinstance(layer, nn.DenseLayer):
                layers.append({"type": "dense", "in": layer.fan_in, "out": layer.fan_out,
                               "activation": layer.activation})
            elif isinstance(layer, nn.BatchNormLayer):
                layers.append({"type": "batchnorm", "size": len(layer.gamma),
                               "momentum": layer.momentum, "epsilon": layer.epsilon})
                running.append([layer.running_mean.tolist(), layer.running_var.tolist()])
            elif isinstance(layer, nn.ActivationLayer):
                layers.append({"type": "activation", "activation": layer.activation})
            else:
                layers.append({"type": "output", "mode": model.output})
        meta.update(model="fnn", feature_names=json.dumps(list(model.feature_names)),
                    hidden=json.dumps(list(model.hidden)), batch_norm=json.dumps(model.batch_norm),
                    layers=json.dumps(layers), bn_running=json.dumps(running),
                    feature_mean=json.dumps(model.stats.mean.tolist()),
                    feature_std=json.dumps(model.stats.std.tolist()))
        return meta, model.parameters()
    if isinstance(model, GruHedgeModel):
        meta.update(model="gru", feature_names=json.dumps(list(model.feature_names)),
                    hidden_size=str(model.hidden_size), output=model.output,
                    layers=json.dumps([{"type": "gru", "in": 1, "hidden": model.hidden_size},
                                       {"type": "dense", "in": model.head[0].fan_in, "out": 1}]),
                    feature_mean=json.dumps(model.stats.mean.tolist()),
                    feature_std=json.dumps(model.stats.std.tolist()),
                    history_mean=json.dumps(model.history_stats.mean.tolist()),
                    history_std=json.dumps(model.history_stats.std.tolist()))
        return meta, model.parameters()
    if isinstance(model, HwModel):
        meta.update(model="hw", feature_names=json.dumps(["ttm", "bs_delta"]))
        return meta, [model.coef.as_array()]
    if isinstance(model, BsDeltaModel):
        meta.update(model="bs", feature_names=json.dumps(["ttm", "bs_delta"]))
        return meta, []
    raise TypeError(f"cannot serialize {type(model).__name__}")


def dumps(model) -> bytes:
    meta, params = _describe(model)
    body = bytearray()
    body += struct.pack("<I", len(meta))
    for k, v in meta.items():
        kb, vb = k.encode("utf-8"), v.encode("utf-8")
        body += struct.pack("<I", len(kb)) + kb + struct.pack("<I", len(vb)) + vb
    flat = np.concatenate([np.ravel(p) for p in params]) if params else np.empty(0)
    body += struct.pack("<Q", flat.size)
    body += flat.astype("<f8").tobytes()
    return MAGIC + bytes([VERSION]) + bytes(body) + _checksum(bytes(body))


def save_checkpoint(model, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def loads(data: bytes, expect_kind: Optional[OptionKind] = None):
    if len(data) < 5:
        raise CheckpointFormatError("truncated checkpoint header", len(data))
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}", 0)
    if data[4] != VERSION:
        raise CheckpointFormatError(f"unsupported version {data[4]}", 4)
    rd = _Reader(data, 5)
    meta: dict[str, str] = {}
    for _ in range(rd.u32("entry count")):
        key_at = rd.pos
        try:
            k = rd.take(rd.u32("key length"), "key").decode("utf-8")
            v = rd.take(rd.u32("value length"), "value").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("metadata is not UTF-8", key_at) from exc
        meta[k] = v
    n = rd.u64("parameter count")
    flat = np.frombuffer(rd.take(8 * n, "parameters"), dtype="<f8").astype(np.float64)
    end = rd.pos
    stored = rd.take(8, "checksum")
    if rd.pos != len(data):
        raise CheckpointFormatError("trailing bytes after checksum", rd.pos)
    if _checksum(data[5:end]) != stored:
        raise CheckpointFormatError("checksum mismatch", end)

    kind = OptionKind.parse(meta["kind"])
    if expect_kind is not None and kind is not expect_kind:
        raise KindMismatchError(f"checkpoint holds a {kind.name.lower()} model, "
                                f"{expect_kind.name.lower()} requested")
    return _rebuild(meta, flat, kind, offset=5)


def _fill(params: list[np.ndarray], flat: np.ndarray, offset: int) -> None:
    need = sum(p.size for p in params)
    if need != flat.size:
        raise CheckpointFormatError(f"expected {need} parameters, found {flat.size}", offset)
    i = 0
    for p in params:
        p[...] = flat[i:i + p.size].reshape(p.shape)
        i += p.size


def _rebuild(meta: dict[str, str], flat: np.ndarray, kind: OptionKind, offset: int):
    variant = ModelVariant.parse(meta["variant"])
    model_type = meta.get("model")
    if model_type == "fnn":
        layers = json.loads(meta["layers"])
        out = next(l for l in layers if l["type"] == "output")
        model = FnnHedgeModel(kind, variant, hidden=json.loads(meta["hidden"]),
                              output=out["mode"], batch_norm=json.loads(meta["batch_norm"]))
        _fill(model.parameters(), flat, offset)
        bns = [l for l in model.layers if isinstance(l, nn.BatchNormLayer)]
        for layer, (mean, var), spec in zip(bns, json.loads(meta["bn_running"]),
                                            [l for l in layers if l["type"] == "batchnorm"]):
            layer.running_mean[...] = mean
            layer.running_var[...] = var
            layer.momentum = spec["momentum"]
            layer.epsilon = spec["epsilon"]
        model.stats = FeatureStats(np.array(json.loads(meta["feature_mean"])),
                                   np.array(json.loads(meta["feature_std"])))
        return model
    if model_type == "gru":
        model = GruHedgeModel(kind, hidden_size=int(meta["hidden_size"]), output=meta["output"])
        _fill(model.parameters(), flat, offset)
        model.stats = FeatureStats(np.array(json.loads(meta["feature_mean"])),
                                   np.array(json.loads(meta["feature_std"])))
        model.history_stats = FeatureStats(np.array(json.loads(meta["history_mean"])),
                                           np.array(json.loads(meta["history_std"])))
        return model
    if model_type == "hw":
        if flat.size != 3:
            raise CheckpointFormatError("Hull-White checkpoint must hold 3 coefficients", offset)
        return HwModel(kind, HwCoefficients(*map(float, flat)))
    if model_type == "bs":
        return BsDeltaModel(kind)
    raise CheckpointFormatError(f"unknown model type {model_type!r}", offset)


def load_checkpoint(path: str | Path, expect_kind: Optional[OptionKind] = None):
    return loads(Path(path).read_bytes(), expect_kind=expect_kind)
