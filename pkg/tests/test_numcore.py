import io

import numpy as np
import pytest

from cfmpolicy.numcore import (ContractError, Mlp, NumericError, OptimizerState, Rng,
                               adamw_step, grad_check, mlp_backward, mlp_forward,
                               mlp_from_bytes, mlp_grad_check, mlp_to_bytes, read_mlp, write_mlp)


def naive_forward(model, x):
    """Triple-loop reimplementation of the forward pass."""
    h = [list(row) for row in x]
    for w, b, act in zip(model.weights, model.biases, model.activations):
        out = []
        for row in h:
            o = []
            for j in range(w.shape[1]):
                s = b[j]
                for i in range(w.shape[0]):
                    s += row[i] * w[i, j]
                o.append(np.tanh(s) if act == "tanh" else s)
            out.append(o)
        h = out
    return np.array(h)


def test_identity_linear_layer():
    m = Mlp([3, 3], activations=["identity"])
    m.weights[0][...] = np.eye(3)
    y, _ = mlp_forward(m, np.array([[1.0, 2.0, 3.0]]))
    assert np.array_equal(y, [[1.0, 2.0, 3.0]])


def test_zero_weights_give_bias():
    m = Mlp([4, 2], activations=["identity"])
    m.biases[0][...] = [0.5, -1.5]
    x = Rng(0).normal((7, 4))
    assert np.array_equal(m(x), np.tile([0.5, -1.5], (7, 1)))


def test_forward_matches_naive_loops():
    rng = Rng(1)
    m = Mlp([5, 7, 3], rng)
    for b in m.biases:
        b += rng.normal(b.shape)
    x = rng.normal((6, 5))
    assert np.max(np.abs(m(x) - naive_forward(m, x))) <= 1e-12


def test_forward_keeps_leading_dims():
    m = Mlp([3, 4, 2], Rng(2))
    x = Rng(3).normal((2, 5, 3))
    y = m(x)
    assert y.shape == (2, 5, 2)
    assert np.allclose(y.reshape(-1, 2), m(x.reshape(-1, 3)), atol=1e-15)


def test_input_dim_mismatch():
    with pytest.raises(ValueError):
        Mlp([3, 2], Rng(0))(np.ones((1, 4)))


def test_linear_chain_rule():
    m = Mlp([2, 3], Rng(0), ["identity"])
    x = np.array([[1.0, 2.0]])
    y, cache = mlp_forward(m, x)
    grads, _ = mlp_backward(m, cache, np.ones_like(y))
    # weights are stored (in, out): every output unit sees the whole input
    for j in range(3):
        assert np.array_equal(grads[0][:, j], x[0])
    assert np.array_equal(grads[1], np.ones(3))


def test_zero_output_grad():
    m = Mlp([3, 5, 2], Rng(0))
    y, cache = mlp_forward(m, Rng(1).normal((4, 3)))
    grads, gin = mlp_backward(m, cache, np.zeros_like(y))
    assert all(not g.any() for g in grads) and not gin.any()


def test_stale_cache_is_rejected():
    m = Mlp([3, 2], Rng(0))
    y, cache = mlp_forward(m, np.ones((1, 3)))
    m.mark_modified()
    with pytest.raises(ContractError):
        mlp_backward(m, cache, y)
    other = Mlp([3, 2], Rng(0))
    with pytest.raises(ContractError):
        mlp_backward(other, mlp_forward(m, np.ones((1, 3)))[1], y)


def test_backward_is_deterministic():
    m = Mlp([3, 8, 2], Rng(0))
    x = Rng(1).normal((5, 3))
    a = mlp_backward(m, mlp_forward(m, x)[1], np.ones((5, 2)))[0]
    b = mlp_backward(m, mlp_forward(m, x)[1], np.ones((5, 2)))[0]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def sq_loss(target):
    def f(out):
        r = out - target
        return float(np.sum(r * r)), 2 * r
    return f


def test_grad_check_linear_quadratic():
    m = Mlp([3, 2], Rng(0), ["identity"])
    x = Rng(1).normal((8, 3))
    assert mlp_grad_check(m, sq_loss(Rng(2).normal((8, 2))), x) <= 1e-6


def test_grad_check_two_hidden_tanh():
    m = Mlp([4, 6, 5, 2], Rng(0))
    x = Rng(1).normal((16, 4))
    assert mlp_grad_check(m, sq_loss(Rng(2).normal((16, 2))), x, h=1e-5) <= 1e-4


def test_grad_check_catches_corruption():
    m = Mlp([4, 6, 2], Rng(0))
    x = Rng(1).normal((16, 4))
    y, cache = mlp_forward(m, x)
    loss_fn = sq_loss(Rng(2).normal((16, 2)))
    grads, _ = mlp_backward(m, cache, loss_fn(y)[1])
    grads[0][1, 2] += 0.1
    err = grad_check(m.params(), lambda: loss_fn(m(x))[0], grads)
    assert err >= 1e-2


def test_grad_check_non_finite():
    p = np.ones(2)
    with pytest.raises(NumericError):
        grad_check([p], lambda: float("nan"), [np.zeros(2)])


def test_adamw_zero_grad_no_decay():
    p = np.array([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], OptimizerState(weight_decay=0.0))
    assert np.array_equal(p, [1.0, -2.0])


def test_adamw_first_step():
    p = np.zeros(1)
    st = OptimizerState(lr=1e-4)
    adamw_step([p], [np.ones(1)], st)
    assert abs(p[0] + 1e-4) <= 1e-12
    assert st.step_count == 1


def test_adamw_decoupled_decay():
    p = np.array([3.0])
    st = OptimizerState(lr=1e-2, weight_decay=0.5)
    for k in range(1, 4):
        adamw_step([p], [np.zeros(1)], st)
        assert abs(p[0] - 3.0 * (1 - 1e-2 * 0.5) ** k) <= 1e-14


def test_adamw_rejects_non_finite():
    p = np.zeros(2)
    st = OptimizerState()
    with pytest.raises(NumericError):
        adamw_step([p], [np.array([1.0, np.inf])], st)
    assert st.step_count == 0 and not p.any()


def test_rng_streams():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(10 ** 6), b.normal(10 ** 6))
    assert not np.array_equal(Rng(1).uniform(size=8), Rng(2).uniform(size=8))
    c = Rng(42)
    first = c.child(3).normal(4)
    c.normal(100)
    assert np.array_equal(first, c.child(3).normal(4))


def test_param_count_fixed():
    m = Mlp([3, 4, 2], Rng(0))
    n = m.n_params()
    m.load_params([p * 2 for p in m.params()])
    assert m.n_params() == n == 3 * 4 + 4 + 4 * 2 + 2


def test_checkpoint_round_trip_bit_exact():
    m = Mlp([3, 5, 2], Rng(7), ["tanh", "identity"])
    data = mlp_to_bytes(m)
    back = mlp_from_bytes(data)
    assert back.sizes == m.sizes and back.activations == m.activations
    for u, v in zip(m.params(), back.params()):
        assert u.tobytes() == v.tobytes()
    assert mlp_to_bytes(back) == data


def test_checkpoint_layout():
    m = Mlp([2, 1], Rng(0), ["identity"])
    buf = io.BytesIO()
    write_mlp(m, buf)
    raw = buf.getvalue()
    assert raw[:8] == b"CFMLP\x00\x00\x01"
    assert len(raw) == 8 + 8 + 9 + 8 * (2 + 1)


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        read_mlp(io.BytesIO(b"nonsense" + bytes(16)))
    good = mlp_to_bytes(Mlp([2, 2], Rng(0)))
    with pytest.raises(ValueError):
        mlp_from_bytes(good[:-3])
    bad_version = good[:8] + (2).to_bytes(4, "little") + good[12:]
    with pytest.raises(ValueError):
        mlp_from_bytes(bad_version)
