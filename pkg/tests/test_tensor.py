"""Tensor core: forward kernels, gradients, and the double-backward path.

Oracles used here, in order of trust:
  * hand-written nested loops (broadcasting, below),
  * closed-form derivatives computed on paper,
  * central finite differences in float64 (epsilon 1e-5).
"""

import numpy as np
import pytest

import capsgan.tensor as T
from capsgan.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    TensorError,
    finite_difference_check,
    grad,
    precision,
)


def broadcast_add_oracle(a, b):
    """Brute-force broadcast add: explicit index arithmetic, no numpy
    broadcasting anywhere.  Trusted reference for the broadcast rule."""
    rank = max(a.ndim, b.ndim)
    sa = (1,) * (rank - a.ndim) + a.shape
    sb = (1,) * (rank - b.ndim) + b.shape
    out_shape = []
    for da, db in zip(sa, sb):
        if da != db and 1 not in (da, db):
            raise ValueError("not broadcastable")
        out_shape.append(max(da, db))
    out = np.zeros(tuple(out_shape), dtype=np.float64)
    ar = a.reshape(sa)
    br = b.reshape(sb)
    for idx in np.ndindex(*out_shape):
        ia = tuple(0 if d == 1 else i for i, d in zip(idx, sa))
        ib = tuple(0 if d == 1 else i for i, d in zip(idx, sb))
        out[idx] = ar[ia] + br[ib]
    return out


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    eye = Tensor(np.eye(2))
    out = T.matmul(a, eye)
    assert np.array_equal(out.data, np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))


def test_reduce_sum_vector():
    x = Tensor([1.0, 2.0, 3.0])
    assert T.reduce_sum(x, axis=0).item() == 6.0


def test_broadcast_add_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for sa, sb in [((3, 1), (1, 4)), ((2, 3, 1), (3, 5)), ((1,), (6, 1)), ((4, 1, 2), (1, 3, 1))]:
        a = rng.normal(size=sa)
        b = rng.normal(size=sb)
        with precision("float64"):
            got = T.add(Tensor(a), Tensor(b)).data
        want = broadcast_add_oracle(a, b)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-12


def test_shape_mismatch_names_op():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(a, b)
    with pytest.raises(ShapeError, match="add"):
        T.add(a, b)


def test_non_finite_raises():
    zero = Tensor(np.zeros(3))
    one = Tensor(np.ones(3))
    with pytest.raises(NonFiniteError):
        T.div(one, zero)
    with pytest.raises(NonFiniteError):
        T.log(zero)


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 0)))


def test_forward_eager_when_no_tape_open():
    out = T.add(Tensor([1.0]), Tensor([2.0]))
    assert out.node_id is None
    with Tape() as tape:
        taped = T.add(Tensor([1.0]), Tensor([2.0]))
        assert tape.nodes[taped.node_id] is taped


# ---------------------------------------------------------------------------
# first-order gradients
# ---------------------------------------------------------------------------


def test_grad_sum_of_squares():
    with Tape() as tape:
        x = Tensor([1.0, 2.0, 3.0])
        y = T.reduce_sum(T.mul(x, x))
        (g,) = grad(y, [x], tape=tape)
    assert np.allclose(g.data, [2.0, 4.0, 6.0])


def test_grad_of_grad_cubic():
    with precision("float64"), Tape() as tape:
        x = Tensor(2.0)
        y = T.power(x, 3.0)
        (g1,) = grad(y, [x], create_graph=True, tape=tape)
        (g2,) = grad(g1, [x], tape=tape)
    assert g1.item() == pytest.approx(12.0)
    assert g2.item() == pytest.approx(12.0)


def test_grad_three_layer_network_matches_finite_differences():
    rng = np.random.default_rng(11)
    w1 = rng.normal(size=(5, 8))
    w2 = rng.normal(size=(8, 6))
    w3 = rng.normal(size=(6, 1))

    def net(x):
        h = T.tanh(T.matmul(x, Tensor(w1, dtype=np.float64)))
        h = T.maximum_with_constant(T.matmul(h, Tensor(w2, dtype=np.float64)), 0.0)
        return T.reduce_sum(T.matmul(h, Tensor(w3, dtype=np.float64)))

    with precision("float64"):
        x0 = Tensor(rng.normal(size=(3, 5)))
        err = finite_difference_check(net, x0, epsilon=1e-5)
    assert err < 1e-4


def test_grad_rejects_non_scalar_output():
    with Tape() as tape:
        x = Tensor([1.0, 2.0])
        y = T.mul(x, x)
        with pytest.raises(ShapeError):
            grad(y, [x], tape=tape)


def test_grad_requires_tape_membership():
    eager = T.add(Tensor([1.0]), Tensor([1.0]))
    with Tape() as tape:
        with pytest.raises(TensorError):
            grad(eager, [eager], tape=tape)


def test_unreachable_tensor_gets_zero_gradient():
    with Tape() as tape:
        x = Tensor([1.0, 2.0])
        bystander = Tensor([[5.0, 5.0], [5.0, 5.0]])
        y = T.reduce_sum(T.mul(x, x))
        gx, gb = grad(y, [x, bystander], tape=tape)
    assert np.allclose(gx.data, [2.0, 4.0])
    assert np.array_equal(gb.data, np.zeros((2, 2), dtype=np.float32))


def test_detach_blocks_gradient():
    with Tape() as tape:
        x = Tensor([1.0, 2.0, 3.0])
        y = T.reduce_sum(T.mul(x.detach(), x))
        (g,) = grad(y, [x], tape=tape)
    # only the non-detached factor contributes
    assert np.allclose(g.data, [1.0, 2.0, 3.0])


def test_kink_subgradient_is_zero():
    def f(x):
        return T.reduce_sum(T.maximum_with_constant(x, 0.0))

    with precision("float64"), Tape() as tape:
        x = Tensor(np.array([-1.0, 0.0, 2.0]))
        out = f(x)
        (g,) = grad(out, [x], tape=tape)
    assert np.array_equal(g.data, np.array([0.0, 0.0, 1.0]))


def test_fd_check_of_sum_is_exact():
    with precision("float64"):
        x0 = np.random.default_rng(0).normal(size=(4, 3))
        with Tape() as tape:
            leaf = Tensor(x0)
            (g,) = grad(T.reduce_sum(leaf), [leaf], tape=tape)
        # analytic gradient is exactly ones; the difference quotient only
        # matches to rounding because (S+eps)-(S-eps) is evaluated in floats
        assert np.array_equal(g.data, np.ones((4, 3)))
        err = finite_difference_check(lambda t: T.reduce_sum(t), Tensor(x0))
    assert err < 1e-9


def test_fd_check_of_squash_norm_composite():
    def squash_norm(x):
        sq = T.reduce_sum(T.mul(x, x))
        norm = T.sqrt(T.add(sq, Tensor(T.NORM_EPS, dtype=np.float64)))
        scale = T.div(norm, T.add(Tensor(1.0, dtype=np.float64), sq))
        return T.mul(scale, norm)

    with precision("float64"):
        x = Tensor(np.random.default_rng(3).normal(size=7))
        err = finite_difference_check(squash_norm, x)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# finite-difference sweep over every primitive
# ---------------------------------------------------------------------------


def _fd_cases():
    """(name, builder) pairs; builder(rng) -> (f, x0). Values are kept away
    from kinks/poles so the central difference is trustworthy."""

    def with_weight(rng, shape, make):
        w = rng.normal(size=shape)

        def f(x):
            return T.reduce_sum(T.mul(make(x), Tensor(w, dtype=np.float64)))

        return f

    def c(shape, rng, low=None):
        v = rng.normal(size=shape)
        if low is not None:
            v = np.abs(v) + low
        return v

    cases = []

    def simple(name, make, sampler, out_shape=None):
        def build(rng):
            x0 = sampler(rng)
            shape = out_shape(x0) if out_shape else x0.shape
            return with_weight(rng, shape, make), Tensor(x0)

        cases.append((name, build))

    rnd = lambda *s: (lambda rng: c(s, rng))
    pos = lambda *s: (lambda rng: c(s, rng, low=0.5))

    simple("add", lambda x: T.add(x, x), rnd(3, 4))
    simple("add_broadcast", lambda x: T.add(x, Tensor(np.arange(4.0))), rnd(3, 4))
    simple("sub", lambda x: T.sub(Tensor(np.ones((3, 4))), x), rnd(3, 4))
    simple("mul", lambda x: T.mul(x, T.add(x, x)), rnd(2, 5))
    simple("div_num", lambda x: T.div(x, Tensor(np.full((3,), 2.0))), rnd(3))
    simple("div_den", lambda x: T.div(Tensor(np.ones(3)), x), pos(3))
    simple(
        "matmul",
        lambda x: T.matmul(x, Tensor(np.arange(12.0).reshape(4, 3))),
        rnd(2, 4),
        out_shape=lambda x0: (2, 3),
    )
    simple(
        "matmul_batched",
        lambda x: T.matmul(Tensor(np.arange(12.0).reshape(2, 2, 3)), x),
        rnd(2, 3, 2),
        out_shape=lambda x0: (2, 2, 2),
    )
    simple("reshape", lambda x: T.reshape(x, (6,)), rnd(2, 3), out_shape=lambda x0: (6,))
    simple(
        "transpose",
        lambda x: T.transpose(x, (2, 0, 1)),
        rnd(2, 3, 4),
        out_shape=lambda x0: (4, 2, 3),
    )
    simple(
        "broadcast",
        lambda x: T.broadcast_to(x, (5, 3, 4)),
        rnd(3, 4),
        out_shape=lambda x0: (5, 3, 4),
    )
    simple(
        "reduce_sum_axis",
        lambda x: T.reduce_sum(x, axis=1, keepdims=True),
        rnd(3, 4),
        out_shape=lambda x0: (3, 1),
    )
    simple(
        "reduce_mean",
        lambda x: T.reduce_mean(x, axis=(0, 2)),
        rnd(2, 3, 4),
        out_shape=lambda x0: (3,),
    )
    simple("power", lambda x: T.power(x, 3.0), rnd(3, 3))
    simple("power_frac", lambda x: T.power(x, 1.5), pos(4))
    simple("sqrt", lambda x: T.sqrt(x), pos(5))
    simple("exp", lambda x: T.exp(x), rnd(4))
    simple("log", lambda x: T.log(x), pos(4))
    simple("tanh", lambda x: T.tanh(x), rnd(3, 3))

    def max_sampler(rng):
        v = c((8,), rng)
        v[np.abs(v) < 0.2] = 0.5  # stay off the kink
        return v

    simple("maximum_with_constant", lambda x: T.maximum_with_constant(x, 0.0), max_sampler)
    simple(
        "concatenate",
        lambda x: T.concatenate([x, Tensor(np.ones((2, 3))), x], axis=0),
        rnd(2, 3),
        out_shape=lambda x0: (6, 3),
    )
    simple(
        "slice",
        lambda x: T.slice_(x, (1, 0), (3, 2)),
        rnd(4, 3),
        out_shape=lambda x0: (2, 2),
    )
    simple(
        "pad",
        lambda x: T.pad(x, (1, 0), (2, 1)),
        rnd(2, 3),
        out_shape=lambda x0: (5, 4),
    )

    gather_idx = np.array([3, 0, 3, 1])
    simple(
        "gather",
        lambda x: T.gather(x, gather_idx, axis=1),
        rnd(2, 5),
        out_shape=lambda x0: (2, 4),
    )
    scatter_idx = np.array([0, 2, 2, 1, 0])
    simple(
        "scatter_add",
        lambda x: T.scatter_add(x, scatter_idx, axis=1, size=4),
        rnd(2, 5),
        out_shape=lambda x0: (2, 4),
    )
    simple(
        "scatter_add_rank3",
        lambda x: T.scatter_add(x, np.array([1, 1, 0]), axis=0, size=2),
        rnd(3, 2, 2),
        out_shape=lambda x0: (2, 2, 2),
    )
    return cases


def test_every_primitive_matches_finite_differences():
    cases = _fd_cases()
    draws = 4
    total = 0
    with precision("float64"):
        for name, build in cases:
            for k in range(draws):
                rng = np.random.default_rng(hash(name) % 10_000 + k)
                f, x0 = build(rng)
                err = finite_difference_check(f, x0, epsilon=1e-5)
                assert err < 1e-4, f"{name} draw {k}: fd error {err}"
                total += 1
    assert total >= 100


# ---------------------------------------------------------------------------
# second order and tape mechanics
# ---------------------------------------------------------------------------


def test_second_order_penalty_matches_finite_differences():
    """Loss containing the norm of an input gradient, differentiated with
    respect to the weights.  For score(x) = sum(w * x) + sum(w * w) * sum(x),
    the input gradient depends on w, so d(penalty)/dw needs the double
    backward.  Checked against hand-rolled central differences."""
    rng = np.random.default_rng(21)
    x0 = rng.normal(size=(4,))
    w0 = rng.normal(size=(4,))

    def penalty(w_np):
        with Tape() as tape:
            w = Tensor(w_np, dtype=np.float64)
            x = Tensor(x0, dtype=np.float64)
            wsq = T.reduce_sum(T.mul(w, w))
            score = T.add(T.reduce_sum(T.mul(w, x)), T.mul(wsq, T.reduce_sum(x)))
            (gx,) = grad(score, [x], create_graph=True, tape=tape)
            sq = T.reduce_sum(T.mul(gx, gx))
            norm = T.sqrt(T.add(sq, Tensor(T.NORM_EPS, dtype=np.float64)))
            shifted = T.sub(norm, Tensor(1.0, dtype=np.float64))
            out = T.mul(shifted, shifted)
            return out, w, tape

    with precision("float64"):
        out, w, tape = penalty(w0)
        (analytic,) = grad(out, [w], tape=tape)
        analytic = np.array(analytic.data)

        eps = 1e-5
        numeric = np.zeros_like(w0)
        for i in range(w0.size):
            bumped = w0.copy()
            bumped[i] += eps
            hi = penalty(bumped)[0].item()
            bumped[i] -= 2 * eps
            lo = penalty(bumped)[0].item()
            numeric[i] = (hi - lo) / (2 * eps)

    err = np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))
    assert err < 1e-3


def test_gradient_pass_appends_instead_of_mutating():
    with Tape() as tape:
        x = Tensor([1.0, 2.0])
        y = T.reduce_sum(T.mul(x, x))
        before = len(tape.nodes)
        snapshot = [(t.op, t.data.tobytes()) for t in tape.nodes]
        (g,) = grad(y, [x], create_graph=True, tape=tape)
        assert len(tape.nodes) > before
        for t, (op, raw) in zip(tape.nodes[:before], snapshot):
            assert t.op == op and t.data.tobytes() == raw
        assert tape.nodes[g.node_id] is g


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    with Tape() as tape:
        x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
        h = T.tanh(T.matmul(x, w))
        y = T.reduce_mean(T.mul(h, h))
        grad(y, [w], create_graph=True, tape=tape)
        checked = tape.replay()
    assert checked > 0


def test_same_inputs_give_bit_identical_outputs():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
        return T.reduce_sum(T.exp(T.mul(T.matmul(x, w), Tensor(0.01)))).data.tobytes()

    assert run() == run()
