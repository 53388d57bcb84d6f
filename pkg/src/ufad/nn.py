"""Minimal NHWC conv-net core with hand-written backward passes.

Exactly four layer kinds are supported (4x4/stride-2 convolution, fully
connected, leaky rectifier, sigmoid) -- enough for the two detector
architectures used in this project.  Forward passes cache what the backward
pass needs; gradients are exact and are cross-checked against central finite
differences in the test suite.  All code is dtype-agnostic so the same paths
run in float32 for training and float64 for gradient checking.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.2
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_CKPT_MAGIC = b"UFADCKPT"


class ShapeError(ValueError):
    """Input tensor incompatible with a layer; message names the layer."""


class TrainingError(RuntimeError):
    """Raised when an optimizer step sees a non-finite gradient."""


def sigmoid(z):
    """Numerically stable logistic, clamped to the open interval (0, 1)."""
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    eps = float(np.finfo(out.dtype).eps)  # plain float: no dtype promotion
    return np.clip(out, eps, 1.0 - eps)


def sigmoid_backward(s, ds):
    return ds * s * (1.0 - s)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy from raw logits.

    Returns (loss, dlogits) where dlogits is the gradient of the mean loss.
    Scores are oriented 0 = bona fide, 1 = attack.
    """
    z = np.asarray(logits).reshape(-1)
    t = np.asarray(targets, dtype=z.dtype).reshape(-1)
    if z.shape != t.shape:
        raise ShapeError(f"bce: {z.shape} logits vs {t.shape} targets")
    # softplus(z) - t*z, computed without overflow
    loss = np.mean(np.maximum(z, 0) - t * z + np.log1p(np.exp(-np.abs(z))))
    dz = (sigmoid(z) - t) / z.shape[0]
    return loss, dz


class Conv4x4:
    """4x4 convolution, stride 2, pad 1: spatial dims exactly halve."""

    def __init__(self, name, cin, cout):
        self.name = name
        self.cin = cin
        self.cout = cout

    def param_shapes(self):
        return {"w": (4, 4, self.cin, self.cout), "b": (self.cout,)}

    def fan_in(self):
        return 16 * self.cin

    def forward(self, params, x):
        n, h, w, c = x.shape
        if c != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} channels, got {c}")
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: odd spatial dims {h}x{w}")
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(xp, (4, 4), axis=(1, 2))[:, ::2, ::2]
        ho, wo = win.shape[1], win.shape[2]
        # (kh, kw, cin) patch order matches w.reshape(16*cin, cout)
        col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
        col = col.reshape(n * ho * wo, 16 * c)
        y = col @ params["w"].reshape(16 * c, self.cout)
        y += params["b"]
        ctx = (col, (n, h, w, c), (ho, wo))
        return y.reshape(n, ho, wo, self.cout), ctx

    def backward(self, params, ctx, dy, need_dx=True):
        col, (n, h, w, c), (ho, wo) = ctx
        dym = dy.reshape(n * ho * wo, self.cout)
        grads = {
            "w": (col.T @ dym).reshape(4, 4, c, self.cout),
            "b": dym.sum(axis=0),
        }
        if not need_dx:
            return None, grads
        dcol = dym @ params["w"].reshape(16 * c, self.cout).T
        dcol = dcol.reshape(n, ho, wo, 4, 4, c)
        dxp = np.zeros((n, h + 2, w + 2, c), dtype=dy.dtype)
        for kh in range(4):
            for kw in range(4):
                dxp[:, kh : kh + 2 * ho : 2, kw : kw + 2 * wo : 2, :] += dcol[
                    :, :, :, kh, kw, :
                ]
        return dxp[:, 1:-1, 1:-1, :], grads


class Dense:
    """Fully connected layer on flattened inputs."""

    def __init__(self, name, fan_in, fan_out):
        self.name = name
        self.cin = fan_in
        self.cout = fan_out

    def param_shapes(self):
        return {"w": (self.cin, self.cout), "b": (self.cout,)}

    def fan_in(self):
        return self.cin

    def forward(self, params, x):
        orig_shape = x.shape
        flat = x.reshape(orig_shape[0], -1)
        if flat.shape[1] != self.cin:
            raise ShapeError(
                f"{self.name}: expected fan-in {self.cin}, got {flat.shape[1]}"
            )
        y = flat @ params["w"] + params["b"]
        return y, (flat, orig_shape)

    def backward(self, params, ctx, dy, need_dx=True):
        flat, orig_shape = ctx
        grads = {"w": flat.T @ dy, "b": dy.sum(axis=0)}
        if not need_dx:
            return None, grads
        return (dy @ params["w"].T).reshape(orig_shape), grads


class LeakyReLU:
    """Elementwise max(x, slope*x)."""

    def __init__(self, name, slope=LEAKY_SLOPE):
        self.name = name
        self.slope = slope

    def param_shapes(self):
        return {}

    def forward(self, params, x):
        return np.maximum(x, self.slope * x), (x > 0)

    def backward(self, params, ctx, dy, need_dx=True):
        if not need_dx:
            return None, {}
        # build the multiplier in dy's dtype (a bool mask times a python
        # float would promote everything downstream to float64)
        mult = ctx.astype(dy.dtype)
        mult *= 1.0 - self.slope
        mult += self.slope
        return dy * mult, {}


class Stack:
    """A plain sequence of layers sharing one parameter namespace."""

    def __init__(self, layers):
        self.layers = list(layers)

    def param_shapes(self):
        shapes = {}
        for layer in self.layers:
            for key, shp in layer.param_shapes().items():
                shapes[f"{layer.name}/{key}"] = shp
        return shapes

    def _params_of(self, store, layer):
        return {k: store[f"{layer.name}/{k}"] for k in layer.param_shapes()}

    def forward(self, store, x):
        ctxs = []
        for layer in self.layers:
            x, ctx = layer.forward(self._params_of(store, layer), x)
            ctxs.append(ctx)
        return x, ctxs

    def backward(self, store, ctxs, dy, grads, need_dx=True):
        """Accumulate parameter gradients into `grads`; return dx (or None)."""
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            want_dx = need_dx or i > 0
            dy, layer_grads = layer.backward(
                self._params_of(store, layer), ctxs[i], dy, need_dx=want_dx
            )
            for key, g in layer_grads.items():
                name = f"{layer.name}/{key}"
                if name in grads:
                    grads[name] = grads[name] + g
                else:
                    grads[name] = g
        return dy


@dataclass
class ParamStore:
    """Named parameter tensors plus Adam moment buffers."""

    tensors: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def names(self):
        return sorted(self.tensors)

    def copy(self):
        return ParamStore(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
        )

    def astype(self, dtype):
        return ParamStore(
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.m.items()},
            {k: v.astype(dtype) for k, v in self.v.items()},
        )


def init_stack_params(shapes, layer_seed_of, fan_in_of, seed, dtype=np.float32):
    """He-style fan-in scaled init (leaky gain); biases start at zero.

    `layer_seed_of` maps a tensor name to a stable integer stream id so that
    architecturally identical stacks initialize identically regardless of
    naming.
    """
    store = ParamStore()
    gain = 2.0 / (1.0 + LEAKY_SLOPE**2)
    for name, shape in shapes.items():
        if name.endswith("/b"):
            store[name] = np.zeros(shape, dtype=dtype)
            continue
        stream = np.random.default_rng(
            np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *layer_seed_of(name)])
        )
        std = np.sqrt(gain / fan_in_of(name))
        store[name] = (stream.standard_normal(shape) * std).astype(dtype)
    return store


def adam_step(store, grads, lr, step_index, betas=(ADAM_BETA1, ADAM_BETA2), eps=ADAM_EPS):
    """One in-place adaptive-moment update with bias correction.

    `step_index` is 1-based.  Missing entries in `grads` are treated as zero
    gradients (their moments still decay per the update rule being skipped
    entirely -- i.e. parameters without gradients are left untouched).
    """
    b1, b2 = betas
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    for name in store.names():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for tensor {name!r}")
        p = store.tensors[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} != {p.shape} for {name!r}")
        if name not in store.m:
            store.m[name] = np.zeros_like(p)
            store.v[name] = np.zeros_like(p)
        m, v = store.m[name], store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return store


def save_checkpoint(path, store, meta):
    """Named-tensor container: magic, JSON index, raw little-endian blobs."""
    entries = []
    blobs = []
    offset = 0
    for name in store.names():
        arr = np.ascontiguousarray(store.tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (ParamStore, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        body = fh.read()
    store = ParamStore()
    for ent in header["tensors"]:
        raw = body[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"]).newbyteorder("<"))
        store[ent["name"]] = arr.reshape(ent["shape"]).astype(ent["dtype"])
    return store, header["meta"]
