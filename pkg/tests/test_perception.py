import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfmpolicy.numcore import ContractError, Mlp, Rng
from cfmpolicy.perception import CloudEncoder, Normalizer, RangeError, downsample, fps


def greedy_oracle(points, m, start=0):
    """Exhaustive greedy max-min: recompute every candidate's distance set."""
    chosen = [start]
    while len(chosen) < m:
        scores = []
        for i in range(len(points)):
            if i in chosen:
                scores.append(-1.0)
                continue
            scores.append(min(float(np.sum((points[i] - points[j]) ** 2)) for j in chosen))
        chosen.append(int(np.argmax(scores)))  # argmax keeps the lowest index on ties
    return chosen


def collinear():
    return np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [9.0, 0, 0]])


def test_fps_collinear_examples():
    pts = collinear()
    assert list(fps(pts, 2)) == [0, 3]
    assert list(fps(pts, 3)) == [0, 3, 2]


def test_fps_full_is_permutation():
    pts = Rng(0).normal((17, 3))
    idx = fps(pts, 17, start_index=5)
    assert sorted(idx) == list(range(17)) and idx[0] == 5


def test_fps_errors():
    pts = collinear()
    with pytest.raises(RangeError):
        fps(pts, 5)
    with pytest.raises(RangeError):
        fps(pts, 0)
    with pytest.raises(RangeError):
        fps(pts, 2, start_index=4)
    with pytest.raises(ValueError):
        fps(np.zeros((4, 2)), 2)


def test_fps_ties_go_to_lowest_index():
    # four corners of a square seen from the centre: all tie
    pts = np.array([[0.0, 0, 0], [1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0]])
    assert list(fps(pts, 2)) == [0, 1]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.integers(0, 10 ** 6), st.booleans())
def test_fps_matches_oracle(n, seed, grid):
    rng = Rng(seed)
    pts = rng.normal((n, 3))
    if grid:
        pts = np.round(pts)  # coarse grid produces exact ties
    m = int(rng.integers(1, n + 1))
    start = int(rng.integers(0, n))
    idx = list(fps(pts, m, start))
    assert idx == greedy_oracle(pts, m, start)
    assert idx[0] == start and len(set(idx)) == m


def test_downsample_shape():
    pts = Rng(0).normal((128, 3))
    out = downsample(pts, 32)
    assert out.shape == (32, 3)
    assert np.array_equal(out, pts[fps(pts, 32)])


def test_encoder_permutation_and_duplication_invariant():
    enc = CloudEncoder(Rng(0))
    pts = Rng(1).normal((32, 3))
    e = enc(pts)
    assert e.shape == (64,)
    perm = Rng(2).permutation(32)
    assert np.allclose(enc(pts[perm]), e, atol=1e-14, rtol=0)
    assert np.allclose(enc(np.concatenate([pts, pts])), e, atol=1e-14, rtol=0)


def test_encoder_single_point_stub():
    point = Mlp([3, 3], None, ["identity"])
    point.weights[0][...] = np.eye(3)
    head = Mlp([3, 3], None, ["identity"])
    head.weights[0][...] = np.eye(3)
    enc = CloudEncoder(point_mlp=point, head=head)
    p = np.array([[0.1, -0.2, 0.3]])
    # per-point output, then the pooled tanh
    assert np.allclose(enc(p), np.tanh(p[0]), atol=1e-15)


def test_encoder_batched_and_empty():
    enc = CloudEncoder(Rng(0))
    clouds = Rng(1).normal((4, 2, 10, 3))
    out = enc(clouds)
    assert out.shape == (4, 2, 64)
    assert np.allclose(out[2, 1], enc(clouds[2, 1]), atol=1e-14)
    with pytest.raises(RangeError):
        enc(np.zeros((0, 3)))


def test_encoder_gradient():
    from cfmpolicy.numcore import grad_check

    enc = CloudEncoder(Rng(0), point_sizes=(3, 6, 8), out_dim=4)
    pts = Rng(1).normal((3, 7, 3))
    w = Rng(2).normal((3, 4))

    def loss():
        return float(np.sum(enc(pts) * w))

    out, cache = enc.forward(pts)
    grads = enc.backward(cache, w)
    assert grad_check(enc.params(), loss, grads) <= 1e-4


def test_normalizer_examples():
    n = Normalizer([-2.0], [2.0])
    assert n.normalize([0.0])[0] == 0.0
    assert n.normalize([2.0])[0] == 1.0 and n.normalize([-2.0])[0] == -1.0
    assert n.normalize([4.0])[0] == 2.0  # extrapolates


def test_normalizer_fit_and_round_trip():
    data = Rng(0).normal((100, 4)) * [1, 2, 3, 4] + 1
    n = Normalizer.fit(data)
    y = n.normalize(data)
    assert np.array_equal(y.min(axis=0), -np.ones(4))
    assert np.array_equal(y.max(axis=0), np.ones(4))
    x = Rng(1).normal((50, 4)) * 5
    assert np.max(np.abs(n.denormalize(n.normalize(x)) - x)) <= 1e-12


def test_normalizer_degenerate_dim():
    data = np.array([[1.0, 3.0], [2.0, 3.0]])
    n = Normalizer.fit(data)
    y = n.normalize([[1.5, 7.0]])
    assert y[0, 1] == 0.0
    assert n.denormalize(y)[0, 1] == 3.0


def test_normalizer_errors():
    with pytest.raises(ContractError):
        Normalizer.fit(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Normalizer([1.0], [0.0])
