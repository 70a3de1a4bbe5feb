"""Model parameters: construction, initialization and checkpoint files.

Parameters live in a flat name -> Tensor map with deterministic ordering.
Initialization conventions that the decoder relies on:

* offset predictors start at zero weights with biases spread on a ring, so
  sampling begins near the box center;
* mixer generators start as identity mixing with a zero aggregation layer,
  so a fresh layer is a pure residual;
* box-refinement and regression output layers start at zero, so refinement
  is the identity until trained.

Checkpoint layout: magic ``FDCP`` + uint32 format version + uint64 header
length + JSON header (names, shapes, dtypes, offsets, step, config hash)
+ raw little-endian tensor bytes.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from . import tensor as T
from .config import ModelSection

CHECKPOINT_MAGIC = b"FDCP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _dtype_of(precision: str):
    return T.DOUBLE if precision == "double" else T.SINGLE


class ParamStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self):
        self._params: dict[str, T.Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> T.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name}")
        t = T.Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> T.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())


def _he(rng, fan_in, shape):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _ring_bias(K: int, rest: int, radius_raw: float, dims: int) -> np.ndarray:
    """Offset-predictor bias: K points on a ring (in pre-tanh units), tiled."""
    angles = 2.0 * math.pi * np.arange(K) / K
    ring = np.zeros((K, dims))
    ring[:, 0] = radius_raw * np.cos(angles)
    ring[:, 1] = radius_raw * np.sin(angles)
    return np.tile(ring, (rest, 1)).reshape(-1)


def init_model_params(cfg: ModelSection, seed: int) -> ParamStore:
    dtype = _dtype_of(cfg.precision)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A17]))
    C = cfg.channels
    K = cfg.num_points
    M = cfg.num_cam_scales
    R = cfg.num_lidar_scales
    Tt = cfg.num_frames
    n_cls = cfg.num_classes
    store = ParamStore()

    def p(name, arr):
        return store.add(name, np.asarray(arr, dtype=dtype))

    # effective ring radius 0.5 of the box half-extent after tanh squashing
    radius_raw = math.atanh(min(0.5 / cfg.max_offset_factor, 0.99))

    p("query.default_embedding", rng.normal(0.0, 0.02, size=(C,)))

    for layer in range(cfg.num_layers):
        for branch, S, off_dims, w_count in (
            ("lidar", K, 2, R * K),
            ("camera", Tt * K, 3, M * Tt * K),
        ):
            base = f"layer{layer}.{branch}"
            n_off = (R * K if branch == "lidar" else Tt * K) * off_dims
            p(f"{base}.offset_w", np.zeros((C, n_off)))
            p(
                f"{base}.offset_b",
                _ring_bias(K, R if branch == "lidar" else Tt, radius_raw, off_dims),
            )
            p(f"{base}.weight_w", np.zeros((C, w_count)))
            p(f"{base}.weight_b", np.zeros(w_count))
            # adaptive mixing: identity start, zero aggregation
            p(f"{base}.mix.chan_w", np.zeros((C, C * C)))
            p(f"{base}.mix.chan_b", np.eye(C).reshape(-1))
            p(f"{base}.mix.spat_w", np.zeros((C, S * S)))
            p(f"{base}.mix.spat_b", np.eye(S).reshape(-1))
            p(f"{base}.mix.ln_chan_gain", np.ones(C))
            p(f"{base}.mix.ln_chan_shift", np.zeros(C))
            p(f"{base}.mix.ln_spat_gain", np.ones(S))
            p(f"{base}.mix.ln_spat_shift", np.zeros(S))
            p(f"{base}.mix.agg_w", np.zeros((S * C, C)))
            p(f"{base}.mix.agg_b", np.zeros(C))
            p(f"{base}.mix.ln_out_gain", np.ones(C))
            p(f"{base}.mix.ln_out_shift", np.zeros(C))
            # uncertainty: distance predictor and auxiliary BEV regressor
            p(f"{base}.dist.w1", _he(rng, C, (C, C)))
            p(f"{base}.dist.b1", np.zeros(C))
            p(f"{base}.dist.w2", _he(rng, C, (C, 1)))
            p(f"{base}.dist.b2", np.zeros(1))
            p(f"{base}.reg.w1", _he(rng, C, (C, C)))
            p(f"{base}.reg.b1", np.zeros(C))
            p(f"{base}.reg.w2", np.zeros((C, 2)))
            p(f"{base}.reg.b2", np.zeros(2))

        base = f"layer{layer}"
        p(f"{base}.fuse.w1", _he(rng, 2 * C, (2 * C, 2 * C)))
        p(f"{base}.fuse.b1", np.zeros(2 * C))
        p(f"{base}.fuse.w2", _he(rng, 2 * C, (2 * C, C)))
        p(f"{base}.fuse.b2", np.zeros(C))
        p(f"{base}.fuse.ln_gain", np.ones(C))
        p(f"{base}.fuse.ln_shift", np.zeros(C))
        p(f"{base}.cls.w", np.zeros((C, n_cls)))
        p(f"{base}.cls.b", np.full(n_cls, -2.0))  # sigmoid ~ 0.12 prior
        p(f"{base}.refine.w1", _he(rng, C, (C, C)))
        p(f"{base}.refine.b1", np.zeros(C))
        p(f"{base}.refine.w2", np.zeros((C, 10)))
        p(f"{base}.refine.b2", np.zeros(10))
    return store


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, store: ParamStore, step: int, config_hash: str,
                    optimizer: dict | None = None):
    """Write params (plus optional optimizer state) as a flat named-tensor list."""
    entries = []
    blobs = []
    offset = 0

    def emit(name, arr, kind):
        nonlocal offset
        raw = np.ascontiguousarray(arr)
        if raw.dtype.byteorder == ">":
            raw = raw.astype(raw.dtype.newbyteorder("<"))
        b = raw.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(raw.shape),
                "dtype": raw.dtype.name,
                "offset": offset,
                "nbytes": len(b),
                "kind": kind,
            }
        )
        blobs.append(b)
        offset += len(b)

    for name, t in store.items():
        emit(name, t.data, "param")
    for name, arr in (optimizer or {}).items():
        emit(name, arr, "optimizer")
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "step": int(step),
            "config_hash": config_hash,
            "tensors": entries,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str):
    """Returns (param map, step, config_hash, optimizer-state map)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    tensors = {}
    optimizer = {}
    for e in header["tensors"]:
        buf = data[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        if e.get("kind") == "optimizer":
            optimizer[e["name"]] = arr
        else:
            tensors[e["name"]] = arr
    return tensors, header["step"], header["config_hash"], optimizer


def restore_into(store: ParamStore, tensors: dict):
    missing = [n for n in store.names() if n not in tensors]
    extra = [n for n in tensors if n not in store]
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match model (missing={missing[:3]}, extra={extra[:3]})"
        )
    for name, t in store.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise CheckpointError(f"shape mismatch for {name}")
        t.data = arr.astype(t.data.dtype)
