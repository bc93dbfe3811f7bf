"""Small deterministic numerical core: MLPs with hand-written backprop, AdamW,
a seeded RNG wrapper, finite-difference gradient checks and a binary
parameter checkpoint format.

Everything runs in float64. Arrays are plain ``numpy.ndarray``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "identity")

CKPT_MAGIC = b"CFMLP\x00\x00\x01"
CKPT_VERSION = 1


class NumericError(ArithmeticError):
    """Raised when a loss, gradient or activation becomes NaN/Inf."""


class ContractError(RuntimeError):
    """Raised when an operation is called with a stale or mismatched state."""


def check_finite(x, what: str = "value"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------


class Rng:
    """Seeded counter-based generator (numpy Philox).

    Equal seeds and equal call sequences give equal streams. ``child(i)``
    derives an independent stream from ``(seed, i)`` without touching the
    parent state, which is what per-episode streams are built from.
    """

    def __init__(self, seed: int, *, _key: Sequence[int] | None = None):
        self.seed = int(seed)
        self._key = tuple(_key) if _key is not None else (self.seed,)
        ss = np.random.SeedSequence(list(self._key))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "Rng":
        return Rng(self.seed, _key=self._key + (int(index),))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * scale

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def coin(self) -> bool:
        return bool(self._gen.integers(0, 2))


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------


@dataclass
class ActivationCache:
    owner: "Mlp"
    version: int
    lead_shape: tuple
    inputs: list = field(default_factory=list)  # input to every layer (2-D)
    outputs: list = field(default_factory=list)  # post-activation of every layer


class Mlp:
    """Fully connected network with per-layer activation tags.

    Weights are stored ``(in_dim, out_dim)`` so a layer is ``act(x @ W + b)``.
    Inputs may carry any number of leading batch dimensions.
    """

    def __init__(self, sizes: Sequence[int], rng: Rng | None = None,
                 activations: Sequence[str] | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        n = len(sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n - 1) + ["identity"]
        activations = list(activations)
        if len(activations) != n or any(a not in ACTIVATIONS for a in activations):
            raise ValueError(f"bad activations {activations}")
        self.sizes = sizes
        self.activations = activations
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(n):
            if rng is None:
                w = np.zeros((sizes[i], sizes[i + 1]))
            else:
                # Xavier-uniform keeps tanh units out of saturation at init
                lim = np.sqrt(6.0 / (sizes[i] + sizes[i + 1]))
                w = rng.uniform(-lim, lim, (sizes[i], sizes[i + 1]))
            self.weights.append(w)
            self.biases.append(np.zeros(sizes[i + 1]))
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def mark_modified(self):
        self.version += 1

    def copy(self) -> "Mlp":
        other = Mlp(self.sizes, None, self.activations)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def load_params(self, values: Sequence[np.ndarray]):
        cur = self.params()
        if len(values) != len(cur):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(cur, values):
            if dst.shape != np.shape(src):
                raise ValueError(f"shape mismatch {dst.shape} vs {np.shape(src)}")
            dst[...] = src
        self.mark_modified()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
        return mlp_forward(self, x)

    def backward(self, cache: ActivationCache, grad_out: np.ndarray):
        return mlp_backward(self, cache, grad_out)


def mlp_forward(model: Mlp, x: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != model.input_dim:
        raise ValueError(
            f"input last dim {x.shape[-1:]} != model input_dim {model.input_dim}")
    lead = x.shape[:-1]
    h = x.reshape(-1, model.input_dim)
    cache = ActivationCache(model, model.version, lead)
    for w, b, act in zip(model.weights, model.biases, model.activations):
        cache.inputs.append(h)
        z = h @ w + b
        h = np.tanh(z) if act == "tanh" else z
        cache.outputs.append(h)
    return h.reshape(lead + (model.output_dim,)), cache


def mlp_backward(model: Mlp, cache: ActivationCache, grad_out: np.ndarray):
    """Backprop ``grad_out`` through the cached forward pass.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` is ordered like
    ``model.params()``.
    """
    if cache.owner is not model or cache.version != model.version:
        raise ContractError("activation cache does not belong to this model state")
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, model.output_dim)
    if g.shape[0] != cache.inputs[0].shape[0]:
        raise ContractError("output gradient batch does not match cache")
    grads: list[np.ndarray] = [None] * (2 * model.n_layers)  # type: ignore[list-item]
    for i in reversed(range(model.n_layers)):
        if model.activations[i] == "tanh":
            y = cache.outputs[i]
            g = g * (1.0 - y * y)
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ model.weights[i].T
    return grads, g.reshape(cache.lead_shape + (model.input_dim,))


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               state: OptimizerState) -> OptimizerState:
    """In-place decoupled-weight-decay Adam update of ``params``."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for g in grads:
        check_finite(g, "gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step_count += 1
    k = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** k
    c2 = 1.0 - b2 ** k
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class AdamW:
    """AdamW bound to a fixed list of models."""

    def __init__(self, models: Sequence[Mlp], lr=1e-4, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=1e-6):
        self.models = list(models)
        self.state = OptimizerState(lr, beta1, beta2, eps, weight_decay)

    def params(self) -> list[np.ndarray]:
        return [p for m in self.models for p in m.params()]

    def step(self, grads: Sequence[np.ndarray]):
        adamw_step(self.params(), grads, self.state)
        for m in self.models:
            m.mark_modified()


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def grad_check(params: Sequence[np.ndarray], loss_fn: Callable[[], float],
               analytic: Sequence[np.ndarray], h: float = 1e-5,
               max_entries: int | None = None, rng: Rng | None = None) -> float:
    """Max relative error between ``analytic`` and central differences.

    ``loss_fn`` is re-evaluated after perturbing each entry of ``params`` in
    place. With ``max_entries`` only a random subset of entries per array is
    probed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.reshape(-1)
        aflat = np.asarray(a).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or Rng(0)).permutation(flat.size)[:max_entries]
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            lp = loss_fn()
            flat[j] = old - h
            lm = loss_fn()
            flat[j] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("non-finite loss during gradient check")
            num = (lp - lm) / (2 * h)
            den = max(abs(aflat[j]), abs(num), 1e-8)
            worst = max(worst, abs(aflat[j] - num) / den)
    return worst


def mlp_grad_check(model: Mlp, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   batch: np.ndarray, h: float = 1e-5, **kw) -> float:
    """Gradient check of ``model`` under ``loss_fn(output) -> (loss, dloss/doutput)``."""
    out, cache = mlp_forward(model, batch)
    loss, g = loss_fn(out)
    check_finite(loss, "loss")
    grads, _ = mlp_backward(model, cache, g)

    def f():
        return loss_fn(mlp_forward(model, batch)[0])[0]

    return grad_check(model.params(), f, grads, h, **kw)


# --------------------------------------------------------------------------
# checkpoint serialization
# --------------------------------------------------------------------------
#
# layout (little endian):
#   magic[8] | u32 version | u32 n_layers
#   per layer: u32 in_dim | u32 out_dim | u8 activation code
#              | f64[in*out] weights (row-major) | f64[out] bias


def write_mlp(model: Mlp, fh) -> None:
    fh.write(CKPT_MAGIC)
    fh.write(struct.pack("<II", CKPT_VERSION, model.n_layers))
    for w, b, act in zip(model.weights, model.biases, model.activations):
        fh.write(struct.pack("<IIB", w.shape[0], w.shape[1], ACTIVATIONS.index(act)))
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_mlp(fh) -> Mlp:
    if _read_exact(fh, len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError("not an MLP checkpoint (bad magic)")
    version, n_layers = struct.unpack("<II", _read_exact(fh, 8))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    sizes, acts, ws, bs = [], [], [], []
    for _ in range(n_layers):
        din, dout, code = struct.unpack("<IIB", _read_exact(fh, 9))
        if code >= len(ACTIVATIONS):
            raise ValueError(f"unknown activation code {code}")
        if sizes and sizes[-1] != din:
            raise ValueError("layer dims do not chain")
        if not sizes:
            sizes.append(din)
        sizes.append(dout)
        acts.append(ACTIVATIONS[code])
        ws.append(np.frombuffer(_read_exact(fh, 8 * din * dout), "<f8").reshape(din, dout).astype(np.float64))
        bs.append(np.frombuffer(_read_exact(fh, 8 * dout), "<f8").astype(np.float64))
    model = Mlp(sizes, None, acts)
    model.weights, model.biases = ws, bs
    return model


def mlp_to_bytes(model: Mlp) -> bytes:
    buf = io.BytesIO()
    write_mlp(model, buf)
    return buf.getvalue()


def mlp_from_bytes(data: bytes) -> Mlp:
    return read_mlp(io.BytesIO(data))
