"""Point-cloud conditioning: farthest point sampling, a max-pool cloud encoder
and min/max normalization to [-1, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .numcore import ContractError, Mlp, Rng, mlp_backward, mlp_forward


class RangeError(ValueError):
    pass


# --------------------------------------------------------------------------
# farthest point sampling
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _fps_kernel(points, m, start):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    taken = np.zeros(n, dtype=np.bool_)
    cur = start
    for k in range(m):
        out[k] = cur
        taken[cur] = True
        if k == m - 1:
            break
        px, py, pz = points[cur, 0], points[cur, 1], points[cur, 2]
        best = -1.0
        best_i = -1
        for i in range(n):
            if taken[i]:
                continue
            dx = points[i, 0] - px
            dy = points[i, 1] - py
            dz = points[i, 2] - pz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            # strict '>' keeps the lowest index on exact ties
            if mind[i] > best:
                best = mind[i]
                best_i = i
        cur = best_i
    return out


def fps(points, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` point indices, in selection order.

    Distances are squared Euclidean; exact ties go to the lowest index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {points.shape}")
    n = points.shape[0]
    if not 1 <= m <= n:
        raise RangeError(f"cannot pick {m} of {n} points")
    if not 0 <= start_index < n:
        raise RangeError(f"start index {start_index} outside [0, {n})")
    return _fps_kernel(points, int(m), int(start_index))


def downsample(points, m: int, start_index: int = 0) -> np.ndarray:
    return np.asarray(points, dtype=np.float64)[fps(points, m, start_index)]


# --------------------------------------------------------------------------
# cloud encoder
# --------------------------------------------------------------------------


@dataclass
class _EncoderCache:
    point_cache: object
    head_cache: object
    feats: np.ndarray
    pooled: np.ndarray  # tanh of the pooled pre-activations


class CloudEncoder:
    """Shared per-point MLP, coordinate-wise max over points, linear head.

    The per-point MLP ends in tanh; since tanh is monotone the max is taken
    on pre-activations and tanh applied to the pooled vector only, which is
    the same function at a fraction of the cost. Input ``(..., N, 3)``,
    output ``(..., out_dim)``.
    """

    def __init__(self, rng: Rng | None = None, point_sizes=(3, 64, 128), out_dim: int = 64,
                 point_mlp: Mlp | None = None, head: Mlp | None = None):
        if point_mlp is None:
            n = len(point_sizes) - 1
            point_mlp = Mlp(point_sizes, rng, ["tanh"] * (n - 1) + ["identity"])
        if head is None:
            head = Mlp([point_mlp.output_dim, out_dim], rng, ["identity"])
        self.point_mlp = point_mlp
        self.head = head

    @property
    def out_dim(self) -> int:
        return self.head.output_dim

    def mlps(self) -> list[Mlp]:
        return [self.point_mlp, self.head]

    def params(self) -> list[np.ndarray]:
        return self.point_mlp.params() + self.head.params()

    def copy(self) -> "CloudEncoder":
        return CloudEncoder(point_mlp=self.point_mlp.copy(), head=self.head.copy())

    def point_features(self, points) -> np.ndarray:
        """Per-point features after the final tanh, ``(..., N, F)``."""
        return np.tanh(mlp_forward(self.point_mlp, points)[0])

    def forward(self, points):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim < 2 or points.shape[-1] != 3:
            raise ValueError(f"expected (..., N, 3) points, got {points.shape}")
        if points.shape[-2] == 0:
            raise RangeError("empty point cloud")
        feats, pc = mlp_forward(self.point_mlp, points)
        pooled = np.tanh(feats.max(axis=-2))
        out, hc = mlp_forward(self.head, pooled)
        return out, _EncoderCache(pc, hc, feats, pooled)

    def backward(self, cache: _EncoderCache, grad_out):
        head_grads, g_pool = mlp_backward(self.head, cache.head_cache, grad_out)
        g_pool = g_pool * (1.0 - cache.pooled ** 2)
        # ties go to the first point, like np.argmax
        am = np.argmax(cache.feats, axis=-2)
        g_feats = np.zeros(cache.feats.shape)
        np.put_along_axis(g_feats, am[..., None, :], g_pool[..., None, :], axis=-2)
        point_grads, _ = mlp_backward(self.point_mlp, cache.point_cache, g_feats)
        return point_grads + head_grads

    def __call__(self, points) -> np.ndarray:
        return self.forward(points)[0]


def encode_cloud(encoder: CloudEncoder, cloud) -> np.ndarray:
    return encoder(cloud)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


class Normalizer:
    """Per-dimension affine map of ``[min, max]`` onto ``[-1, 1]``.

    Degenerate dimensions (``max == min``) map to 0 and invert to ``min``.
    """

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64).copy()
        self.hi = np.asarray(hi, dtype=np.float64).copy()
        if self.lo.shape != self.hi.shape:
            raise ValueError("min/max shape mismatch")
        if np.any(self.hi < self.lo):
            raise ValueError("max < min")
        span = self.hi - self.lo
        self._live = span > 0
        self._span = np.where(self._live, span, 1.0)

    @classmethod
    def fit(cls, data) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64)
        if data.size == 0:
            raise ContractError("cannot fit a normalizer on empty data")
        data = data.reshape(-1, data.shape[-1])
        return cls(data.min(axis=0), data.max(axis=0))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def normalize(self, x):
        y = 2.0 * (np.asarray(x, dtype=np.float64) - self.lo) / self._span - 1.0
        return np.where(self._live, y, 0.0)

    def denormalize(self, y):
        y = np.asarray(y, dtype=np.float64)
        x = (y + 1.0) * 0.5 * self._span + self.lo
        return np.where(self._live, x, self.lo)


def normalize(norm: Normalizer, x):
    return norm.normalize(x)


def denormalize(norm: Normalizer, y):
    return norm.denormalize(y)
