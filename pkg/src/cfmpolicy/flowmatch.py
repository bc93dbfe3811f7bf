"""Linear probability paths, flow-matching and consistency flow-matching losses,
EMA target parameters and the three samplers (one-step, segment-jump, Euler).

A *field* is any object with ``forward(t, x, cond) -> (v, cache)`` and
``backward(cache, grad_v) -> (param_grads, grad_cond)``; calling it returns
just ``v``. :class:`VelocityNet` is the trainable one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numcore import AdamW, ContractError, Mlp, Rng, check_finite, mlp_backward, mlp_forward


class RangeError(ValueError):
    pass


# --------------------------------------------------------------------------
# time embedding and the velocity network
# --------------------------------------------------------------------------


def time_embedding(t: np.ndarray, n_freq: int = 6) -> np.ndarray:
    """``[t, sin(pi 2^k t), cos(pi 2^k t)]`` for k < n_freq; shape (B, 1 + 2 n_freq)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    w = np.pi * 2.0 ** np.arange(n_freq)
    return np.concatenate([t, np.sin(t * w), np.cos(t * w)], axis=1)


def _batch_t(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(n, float(t))
    return t.reshape(n)


class VelocityNet:
    """MLP velocity field ``v(t, x, cond)``; the condition is concatenated to the input."""

    def __init__(self, x_dim: int, cond_dim: int = 0, hidden: Sequence[int] = (256, 256, 256),
                 rng: Rng | None = None, n_freq: int = 6, mlp: Mlp | None = None):
        self.x_dim = int(x_dim)
        self.cond_dim = int(cond_dim)
        self.n_freq = int(n_freq)
        in_dim = 1 + 2 * self.n_freq + self.x_dim + self.cond_dim
        if mlp is None:
            mlp = Mlp([in_dim, *hidden, self.x_dim], rng)
        elif mlp.input_dim != in_dim or mlp.output_dim != self.x_dim:
            raise ValueError("mlp dims do not match velocity field layout")
        self.mlp = mlp

    def params(self) -> list[np.ndarray]:
        return self.mlp.params()

    def copy(self) -> "VelocityNet":
        return VelocityNet(self.x_dim, self.cond_dim, n_freq=self.n_freq, mlp=self.mlp.copy())

    def _input(self, t, x, cond):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.x_dim:
            raise ValueError(f"expected x of shape (B, {self.x_dim}), got {x.shape}")
        parts = [time_embedding(_batch_t(t, x.shape[0]), self.n_freq), x]
        if self.cond_dim:
            if cond is None:
                raise ValueError("this field needs a condition")
            cond = np.asarray(cond, dtype=np.float64)
            if cond.shape != (x.shape[0], self.cond_dim):
                raise ValueError(f"condition shape {cond.shape} != {(x.shape[0], self.cond_dim)}")
            parts.append(cond)
        return np.concatenate(parts, axis=1)

    def forward(self, t, x, cond=None):
        return mlp_forward(self.mlp, self._input(t, x, cond))

    def backward(self, cache, grad_v):
        grads, g_in = mlp_backward(self.mlp, cache, grad_v)
        g_cond = g_in[:, -self.cond_dim:] if self.cond_dim else None
        return grads, g_cond

    def __call__(self, t, x, cond=None) -> np.ndarray:
        return self.forward(t, x, cond)[0]


class PointTargetField:
    """Exact field ``(x* - x) / (1 - t)`` transporting anything onto ``x*``."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def params(self):
        return []

    def forward(self, t, x, cond=None):
        x = np.asarray(x, dtype=np.float64)
        t = _batch_t(t, x.shape[0])[:, None]
        # at t = 1 the path sits on the target already, so the velocity is 0
        gap = 1.0 - t
        return np.where(gap > 0, (self.target - x) / np.where(gap > 0, gap, 1.0), 0.0), None

    def backward(self, cache, grad_v):
        return [], None

    def __call__(self, t, x, cond=None):
        return self.forward(t, x, cond)[0]


class CountingField:
    """Wraps a field and counts evaluations (NFE)."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def reset(self):
        self.calls = 0

    def __call__(self, t, x, cond=None):
        self.calls += 1
        return self.inner(t, x, cond)


# --------------------------------------------------------------------------
# paths and schedules
# --------------------------------------------------------------------------


def interpolate(x0, x1, t):
    """``(1 - t) x0 + t x1``; ``t`` is a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise RangeError("t outside [0, 1]")
    if t.ndim == 1 and x0.ndim > 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t) * x0 + t * x1


@dataclass
class SegmentSchedule:
    K: int = 2
    delta_t: float = 1e-2
    alpha: float = 1.0
    lambdas: list = field(default_factory=list)
    epsilon: float = 1e-3

    def __post_init__(self):
        if not self.lambdas:
            self.lambdas = [1.0] * self.K
        self.lambdas = [float(v) for v in self.lambdas]
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.delta_t < 1.0 / self.K:
            raise ValueError("delta_t must lie in (0, 1/K)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if len(self.lambdas) != self.K or min(self.lambdas) <= 0:
            raise ValueError("need K positive segment weights")
        if not 0.0 <= self.epsilon < 0.5:
            raise ValueError("epsilon must lie in [0, 0.5)")

    def bounds(self, seg):
        """Sampling interval for ``t`` in segment ``seg``."""
        seg = np.asarray(seg)
        lo = np.maximum(seg / self.K, self.epsilon)
        hi = np.minimum((seg + 1) / self.K - self.delta_t, 1.0 - self.epsilon)
        return lo, hi

    def sample(self, rng: Rng, n: int):
        """Draw a segment index uniformly, then ``t`` uniformly inside it."""
        seg = rng.integers(0, self.K, n)
        lo, hi = self.bounds(seg)
        t = lo + (hi - lo) * rng.uniform(size=n)
        return t, seg

    def to_dict(self) -> dict:
        return {"K": self.K, "delta_t": self.delta_t, "alpha": self.alpha,
                "lambdas": list(self.lambdas), "epsilon": self.epsilon}


def segment_end(seg, K: int):
    return (np.asarray(seg, dtype=np.float64) + 1.0) / K


def f_map(field, t, x_t, cond, seg, K: int):
    """Straight-line extrapolation of ``x_t`` to the end of segment ``seg``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    n = x_t.shape[0]
    t = _batch_t(t, n)
    seg = np.broadcast_to(np.asarray(seg), (n,))
    lo, hi = seg / K, segment_end(seg, K)
    if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
        raise RangeError("t outside its segment")
    return x_t + (hi - t)[:, None] * field(t, x_t, cond)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def cfm_loss(field, x0, x1, t, cond=None):
    """Conditional flow matching regression onto ``x1 - x0``.

    Returns ``(loss, param_grads, grad_cond)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = _batch_t(t, n)
    v, cache = field.forward(t, interpolate(x0, x1, t), cond)
    r = v - (x1 - x0)
    loss = float(np.sum(r * r) / n)
    check_finite(loss, "loss")
    grads, g_cond = field.backward(cache, 2.0 * r / n)
    return loss, grads, g_cond


def consistency_fm_loss(field, target, sched: SegmentSchedule, x0, x1, t, seg,
                        cond=None, target_cond=None):
    """Segmented velocity-consistency loss.

    ``target`` plays the EMA network and gets no gradient. ``target_cond``
    defaults to ``cond``. Returns ``(loss, param_grads, grad_cond)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = _batch_t(t, n)
    seg = np.broadcast_to(np.asarray(seg, dtype=np.int64), (n,))
    if np.any(seg < 0) or np.any(seg >= sched.K):
        raise ContractError("segment index out of range")
    end = segment_end(seg, sched.K)
    s = t + sched.delta_t
    if np.any(t < seg / sched.K - 1e-12) or np.any(s > end + 1e-12):
        raise ContractError("t + delta_t crosses the segment boundary")
    if target_cond is None:
        target_cond = cond

    xt = interpolate(x0, x1, t)
    xs = interpolate(x0, x1, np.minimum(s, 1.0))
    v, cache = field.forward(t, xt, cond)
    vs = target(s, xs, target_cond)

    span = (end - t)[:, None]
    df = (xt + span * v) - (xs + (end - s)[:, None] * vs)
    dv = v - vs
    lam = np.asarray(sched.lambdas)[seg][:, None]
    per = lam[:, 0] * np.sum(df * df, axis=1) + sched.alpha * np.sum(dv * dv, axis=1)
    loss = float(per.mean())
    check_finite(loss, "loss")
    gv = (2.0 * lam * span * df + 2.0 * sched.alpha * dv) / n
    grads, g_cond = field.backward(cache, gv)
    return loss, grads, g_cond


# --------------------------------------------------------------------------
# EMA target parameters
# --------------------------------------------------------------------------


def ema_update(shadow: Sequence[np.ndarray], current: Sequence[np.ndarray], decay: float):
    """``shadow <- decay * shadow + (1 - decay) * current``, in place."""
    if len(shadow) != len(current):
        raise ValueError("parameter count mismatch")
    for s, c in zip(shadow, current):
        if s.shape != c.shape:
            raise ValueError(f"shape mismatch {s.shape} vs {c.shape}")
        s *= decay
        s += (1.0 - decay) * c


class EmaParams:
    """Shadow copy of a model whose parameters follow an EMA of the source."""

    def __init__(self, source, decay: float = 0.95):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        self.decay = float(decay)
        self.model = source.copy()

    def update(self, source):
        ema_update(self.model.params(), source.params(), self.decay)
        for sub in _mlps(self.model):
            sub.mark_modified()


def _mlps(model):
    if isinstance(model, Mlp):
        return [model]
    if hasattr(model, "mlps"):
        return model.mlps()
    if hasattr(model, "mlp"):
        return [model.mlp]
    return []


# --------------------------------------------------------------------------
# samplers
# --------------------------------------------------------------------------


def sample_onestep(field, x0, cond=None):
    """One evaluation: ``x0 + v(0, x0)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    return x0 + field(0.0, x0, cond)


def sample_segments(field, x0, cond=None, K: int = 2):
    """Jump segment by segment; K evaluations."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = np.asarray(x0, dtype=np.float64)
    for i in range(K):
        x = x + (1.0 / K) * field(i / K, x, cond)
    return x


def sample_euler(field, x0, cond=None, n_steps: int = 10):
    """Forward Euler on the flow ODE with ``n_steps`` uniform steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64)
    h = 1.0 / n_steps
    for k in range(n_steps):
        x = x + h * field(k * h, x, cond)
    return x


# --------------------------------------------------------------------------
# unconditional training on toy targets
# --------------------------------------------------------------------------


def train_unconditional(sample_target, x_dim: int, steps: int, seed: int = 0,
                        sched: SegmentSchedule | None = None, objective: str = "consistency",
                        hidden: Sequence[int] = (64, 64, 64), lr: float = 1e-3,
                        batch: int = 256, ema_decay: float = 0.95,
                        final_delta_t: float | None = None, final_lr: float | None = None,
                        n_freq: int = 6):
    """Fit a field to ``sample_target(rng, n) -> (n, x_dim)`` from N(0, I) noise.

    With ``final_delta_t`` the consistency gap shrinks geometrically from
    ``sched.delta_t`` to that value over the run; with ``final_lr`` the
    learning rate follows a cosine from ``lr`` down to it. Returns
    ``(net, ema, losses)``.
    """
    if objective not in ("consistency", "cfm"):
        raise ValueError(f"unknown objective {objective!r}")
    sched = sched or SegmentSchedule(K=1, delta_t=0.05, alpha=0.01)
    rng = Rng(seed)
    net = VelocityNet(x_dim, 0, hidden, rng.child(0), n_freq=n_freq)
    ema = EmaParams(net, ema_decay)
    opt = AdamW([net.mlp], lr=lr)
    data = rng.child(1)
    losses = []
    for k in range(steps):
        frac = k / max(steps - 1, 1)
        if final_lr is not None:
            opt.state.lr = final_lr + 0.5 * (lr - final_lr) * (1.0 + np.cos(np.pi * frac))
        cur = sched
        if final_delta_t is not None and steps > 1:
            dt = sched.delta_t * (final_delta_t / sched.delta_t) ** frac
            cur = SegmentSchedule(sched.K, dt, sched.alpha, sched.lambdas, sched.epsilon)
        x1 = np.asarray(sample_target(data, batch), dtype=np.float64)
        x0 = data.normal((batch, x_dim))
        if objective == "cfm":
            t = data.uniform(cur.epsilon, 1.0 - cur.epsilon, batch)
            loss, grads, _ = cfm_loss(net, x0, x1, t)
        else:
            t, seg = cur.sample(data, batch)
            loss, grads, _ = consistency_fm_loss(net, ema.model, cur, x0, x1, t, seg)
        opt.step(grads)
        ema.update(net)
        losses.append(loss)
    return net, ema, losses

