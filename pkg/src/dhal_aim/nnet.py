"""Small numpy MLP engine: forward/backward passes, Adam and gradient checks."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")
_MAGIC = b"DHALNET\x00"
_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        # split form avoids overflow warnings for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, y):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1 - y * y
    if name == "sigmoid":
        return y * (1 - y)
    return np.ones_like(z)


@dataclass
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray
    activation: str = "relu"


@dataclass
class Cache:
    inputs: list
    pre: list
    outs: list
    version: int


class Mlp:
    """Stack of affine layers, each followed by an elementwise activation."""

    def __init__(self, layers: list[Layer]):
        for a, b in zip(layers, layers[1:]):
            if a.W.shape[1] != b.W.shape[0]:
                raise ValueError(f"incompatible layer sizes {a.W.shape} -> {b.W.shape}")
        self.layers = layers
        self.version = 0

    @classmethod
    def create(cls, sizes, activations, rng=None, dtype=np.float32) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fi, fo, act in zip(sizes[:-1], sizes[1:], activations):
            lim = np.sqrt(6.0 / (fi + fo))
            layers.append(Layer(rng.uniform(-lim, lim, (fi, fo)).astype(dtype), np.zeros(fo, dtype), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    @property
    def sizes(self) -> list:
        return [self.in_dim] + [l.W.shape[1] for l in self.layers]

    def params(self) -> list:
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out

    def astype(self, dtype) -> "Mlp":
        return Mlp([Layer(l.W.astype(dtype), l.b.astype(dtype), l.activation) for l in self.layers])

    def copy(self) -> "Mlp":
        return self.astype(self.layers[0].W.dtype)

    def forward(self, x):
        x = np.asarray(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.in_dim}")
        x = x.astype(self.layers[0].W.dtype, copy=False)
        inputs, pre, outs = [], [], []
        h = x
        for l in self.layers:
            inputs.append(h)
            z = h @ l.W + l.b
            h = _act(l.activation, z)
            pre.append(z)
            outs.append(h)
        cache = Cache(inputs, pre, outs, self.version)
        return (h[0] if squeeze else h), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: Cache, grad_out, pre: bool = False):
        """Gradients ``[dW0, db0, dW1, ...]`` and the input gradient.

        With ``pre=True`` ``grad_out`` is taken with respect to the last
        layer's pre-activation (e.g. logits under a cross-entropy loss).
        """
        if cache.version != self.version:
            raise StaleCacheError("cache was produced before the last parameter update")
        g = np.asarray(grad_out, dtype=self.layers[0].W.dtype)
        if g.ndim == 1:
            g = g[None, :]
        grads = []
        for k, (l, x, z, y) in enumerate(reversed(list(zip(self.layers, cache.inputs, cache.pre, cache.outs)))):
            dz = g if (pre and k == 0) else g * _act_grad(l.activation, z, y)
            grads.append(dz.sum(0))
            grads.append(x.T @ dz)
            g = dz @ l.W.T
        grads.reverse()
        return grads, g

    def step(self, state: "AdamState", grads: list) -> bool:
        ok = adam_step(self.params(), state, grads)
        if ok:
            self.version += 1
        return ok

    def relu_signature(self, cache: Cache) -> bytes:
        return b"".join((z > 0).tobytes() for l, z in zip(self.layers, cache.pre) if l.activation == "relu")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: list, state: AdamState, grads: list) -> bool:
    """In-place bias-corrected Adam update. Returns False when the step was skipped."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter/gradient shapes disagree")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient, Adam step skipped (%d so far)", state.skipped)
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return True


def grad_check(params: list, loss_fn, grads: list, n_coords=100, h=1e-5, rng=None,
               signature=None, max_tries=20) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``loss_fn()`` reads ``params`` (perturbed in place). When ``signature`` is
    given, coordinates whose perturbation flips it (a relu kink inside the
    stencil) are resampled.
    """
    rng = np.random.default_rng(rng)
    sizes = np.array([p.size for p in params])
    worst = 0.0
    done = 0
    while done < n_coords:
        for _ in range(max_tries):
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            j = int(rng.integers(params[k].size))
            flat = params[k].reshape(-1)
            old = flat[j]
            flat[j] = old + h
            fp = loss_fn()
            sp = signature() if signature else None
            flat[j] = old - h
            fm = loss_fn()
            sm = signature() if signature else None
            flat[j] = old
            if sp == sm:
                break
        else:
            raise RuntimeError("could not find a smooth coordinate")
        num = (fp - fm) / (2 * h)
        ana = float(grads[k].reshape(-1)[j])
        denom = max(abs(num) + abs(ana), 1e-12)
        worst = max(worst, abs(num - ana) / denom if denom > 1e-10 else 0.0)
        done += 1
    return worst


def save_checkpoint(path_or_file, nets: dict, meta: bytes = b""):
    """Versioned binary blob: dims, activations and row-major little-endian arrays."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(nets)))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for name in sorted(nets):
        net = nets[name]
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", len(net.layers)))
        for l in net.layers:
            dt = l.W.dtype.str.encode()
            buf.write(struct.pack("<IIB", l.W.shape[0], l.W.shape[1], ACTIVATIONS.index(l.activation)))
            buf.write(struct.pack("<I", len(dt)))
            buf.write(dt)
            buf.write(np.ascontiguousarray(l.W).astype(l.W.dtype.newbyteorder("<")).tobytes())
            buf.write(np.ascontiguousarray(l.b).astype(l.b.dtype.newbyteorder("<")).tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_checkpoint(path_or_file):
    """Inverse of :func:`save_checkpoint`; returns ``(nets, meta)``."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    f = io.BytesIO(data)
    if f.read(len(_MAGIC)) != _MAGIC:
        raise ValueError("not a network checkpoint")
    version, n = struct.unpack("<II", f.read(8))
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (ml,) = struct.unpack("<I", f.read(4))
    meta = f.read(ml)
    nets = {}
    for _ in range(n):
        (nl,) = struct.unpack("<I", f.read(4))
        name = f.read(nl).decode()
        (nlayers,) = struct.unpack("<I", f.read(4))
        layers = []
        for _ in range(nlayers):
            fi, fo, act = struct.unpack("<IIB", f.read(9))
            (dl,) = struct.unpack("<I", f.read(4))
            dt = np.dtype(f.read(dl).decode()).newbyteorder("<")
            W = np.frombuffer(f.read(fi * fo * dt.itemsize), dtype=dt).reshape(fi, fo).astype(dt.newbyteorder("="))
            b = np.frombuffer(f.read(fo * dt.itemsize), dtype=dt).astype(dt.newbyteorder("="))
            layers.append(Layer(W.copy(), b.copy(), ACTIVATIONS[act]))
        nets[name] = Mlp(layers)
    return nets, meta
