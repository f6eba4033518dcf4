"""Capsule primitives against closed forms and a straight-line routing
reference written in plain numpy loops."""

import numpy as np
import pytest

import capsgan.tensor as T
from capsgan.capsules import (
    MarginLossParams,
    capsule_norm,
    dynamic_routing,
    margin_loss,
    primary_capsules,
    squash,
)
from capsgan.tensor import NORM_EPS, ShapeError, Tensor, finite_difference_check, precision


def squash_reference(s):
    sq = np.sum(s * s, axis=-1, keepdims=True)
    norm = np.sqrt(sq + NORM_EPS)
    return s * (sq / (1.0 + sq)) / norm


def routing_reference(u, w, iterations, apply_final_squash):
    """Straight-line dynamic routing: explicit loops, no shared code with
    the library.  Returns (output, couplings per round)."""
    n, num_in, in_dim = u.shape
    _, num_out, out_dim, _ = w.shape
    u_hat = np.zeros((n, num_in, num_out, out_dim))
    for bi in range(n):
        for i in range(num_in):
            for j in range(num_out):
                u_hat[bi, i, j] = w[i, j] @ u[bi, i]
    b = np.zeros((n, num_in, num_out))
    couplings = []
    out = None
    for rnd in range(iterations):
        e = np.exp(b - b.max(axis=2, keepdims=True))
        c = e / e.sum(axis=2, keepdims=True)
        couplings.append(c.copy())
        s = np.zeros((n, num_out, out_dim))
        for bi in range(n):
            for j in range(num_out):
                for i in range(num_in):
                    s[bi, j] += c[bi, i, j] * u_hat[bi, i, j]
        if rnd == iterations - 1:
            out = squash_reference(s) if apply_final_squash else s
        else:
            v = squash_reference(s)
            for bi in range(n):
                for i in range(num_in):
                    for j in range(num_out):
                        b[bi, i, j] += float(u_hat[bi, i, j] @ v[bi, j])
    return out, couplings


# ---------------------------------------------------------------------------
# squash
# ---------------------------------------------------------------------------


def test_squash_zero_vector_stays_zero():
    out = squash(Tensor(np.zeros((2, 3, 4))))
    assert np.array_equal(out.data, np.zeros((2, 3, 4), dtype=np.float32))


def test_squash_unit_norm_gives_half():
    with precision("float64"):
        s = np.zeros((1, 1, 4))
        s[0, 0, 0] = 1.0
        out = squash(Tensor(s)).data
    assert np.linalg.norm(out) == pytest.approx(0.5, abs=1e-7)


def test_squash_large_norm_approaches_one():
    with precision("float64"):
        s = np.zeros((1, 1, 2))
        s[0, 0, 1] = 100.0
        out = squash(Tensor(s)).data
    assert np.linalg.norm(out) == pytest.approx(10000.0 / 10001.0, abs=1e-9)


def test_squash_norms_below_one_on_random_input():
    rng = np.random.default_rng(0)
    out = squash(Tensor(rng.normal(scale=5.0, size=(8, 20, 8)).astype(np.float32)))
    norms = np.linalg.norm(out.data, axis=-1)
    assert np.all(norms < 1.0)


# ---------------------------------------------------------------------------
# primary capsules
# ---------------------------------------------------------------------------


def test_primary_capsules_shape_and_grouping():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 4, 16, 16)).astype(np.float32))
    kernel = Tensor(rng.normal(scale=0.1, size=(16, 4, 5, 5)).astype(np.float32))
    bias = Tensor(np.zeros(16, dtype=np.float32))
    caps = primary_capsules(x, kernel, bias, capsule_dim=8, stride=2, padding=0)
    # conv output is 16 channels over 6x6 positions: (16/8) * 36 capsules
    assert caps.shape == (2, 72, 8)
    assert np.all(np.linalg.norm(caps.data, axis=-1) < 1.0)


def test_primary_capsules_zero_features_give_zero_capsules():
    x = Tensor(np.zeros((1, 2, 10, 10), dtype=np.float32))
    kernel = Tensor(np.random.default_rng(2).normal(size=(8, 2, 3, 3)).astype(np.float32))
    bias = Tensor(np.zeros(8, dtype=np.float32))
    caps = primary_capsules(x, kernel, bias, capsule_dim=4, stride=1)
    assert np.array_equal(caps.data, np.zeros_like(caps.data))


def test_primary_capsules_divisibility_check():
    x = Tensor(np.zeros((1, 2, 10, 10), dtype=np.float32))
    kernel = Tensor(np.ones((9, 2, 3, 3), dtype=np.float32))
    with pytest.raises(ShapeError, match="divisible"):
        primary_capsules(x, kernel, None, capsule_dim=4)


# ---------------------------------------------------------------------------
# dynamic routing
# ---------------------------------------------------------------------------


def test_routing_single_pair_passes_prediction_through():
    rng = np.random.default_rng(3)
    with precision("float64"):
        u = rng.normal(size=(1, 1, 4))
        w = rng.normal(size=(1, 1, 6, 4))
        out = dynamic_routing(Tensor(u), Tensor(w), iterations=3, apply_final_squash=False)
    # softmax over a single output capsule is 1, so s equals the prediction
    assert np.allclose(out.data, (w[0, 0] @ u[0, 0]).reshape(1, 1, 6), atol=1e-12)


def test_routing_first_round_coupling_is_uniform():
    rng = np.random.default_rng(4)
    u = Tensor(rng.normal(size=(2, 5, 4)).astype(np.float32))
    w = Tensor(rng.normal(size=(5, 3, 6, 4)).astype(np.float32))
    _, couplings = dynamic_routing(u, w, iterations=2, return_couplings=True)
    assert np.allclose(couplings[0], 1.0 / 3.0, atol=1e-7)


def test_routing_couplings_sum_to_one_every_round():
    rng = np.random.default_rng(5)
    with precision("float64"):
        u = Tensor(rng.normal(size=(3, 6, 4)))
        w = Tensor(rng.normal(size=(6, 4, 5, 4)))
        _, couplings = dynamic_routing(u, w, iterations=4, return_couplings=True)
    assert len(couplings) == 4
    for c in couplings:
        assert np.allclose(c.sum(axis=2), 1.0, atol=1e-12)


def test_routing_matches_straight_line_reference():
    rng = np.random.default_rng(6)
    with precision("float64"):
        u = rng.normal(size=(2, 2, 4))
        w = rng.normal(size=(2, 2, 4, 4))
        for final_squash in (True, False):
            got = dynamic_routing(
                Tensor(u), Tensor(w), iterations=3, apply_final_squash=final_squash
            ).data
            want, _ = routing_reference(u, w, 3, final_squash)
            assert np.max(np.abs(got - want)) < 1e-6


def test_routing_is_deterministic():
    rng = np.random.default_rng(7)
    u = rng.normal(size=(2, 4, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 6, 8)).astype(np.float32)
    a = dynamic_routing(Tensor(u), Tensor(w), iterations=3).data
    b = dynamic_routing(Tensor(u), Tensor(w), iterations=3).data
    assert a.tobytes() == b.tobytes()


def test_routing_gradients_flow_through_all_rounds():
    rng = np.random.default_rng(8)
    with precision("float64"):
        u0 = rng.normal(size=(1, 2, 3))
        w0 = rng.normal(size=(2, 2, 3, 3))
        sense = rng.normal(size=(1, 2, 3))

        def through_u(u):
            out = dynamic_routing(u, Tensor(w0), iterations=3)
            return T.reduce_sum(T.mul(out, Tensor(sense)))

        def through_w(w):
            out = dynamic_routing(Tensor(u0), w, iterations=3)
            return T.reduce_sum(T.mul(out, Tensor(sense)))

        assert finite_difference_check(through_u, Tensor(u0)) < 1e-4
        assert finite_difference_check(through_w, Tensor(w0)) < 1e-4


def test_routing_rejects_mismatched_weights():
    u = Tensor(np.zeros((1, 3, 4), dtype=np.float32))
    w = Tensor(np.zeros((2, 2, 4, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        dynamic_routing(u, w)


# ---------------------------------------------------------------------------
# margin loss
# ---------------------------------------------------------------------------


def test_margin_loss_analytic_cases():
    with precision("float64"):
        # present class exactly at m_plus contributes nothing
        loss = margin_loss(Tensor([[0.9]]), np.array([[1.0]]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        # absent class exactly at m_minus contributes nothing
        loss = margin_loss(Tensor([[0.1]]), np.array([[0.0]]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        # absent class at 0.5: 0.5 * (0.5 - 0.1)^2 = 0.08
        loss = margin_loss(Tensor([[0.5]]), np.array([[0.0]]))
        assert loss.item() == pytest.approx(0.08, abs=1e-12)


def test_margin_loss_batch_average_and_nonnegative():
    rng = np.random.default_rng(9)
    with precision("float64"):
        lengths = rng.uniform(0.0, 1.0, size=(16, 10))
        labels = np.eye(10)[rng.integers(0, 10, size=16)]
        loss = margin_loss(Tensor(lengths), labels).item()
        assert loss >= 0.0
        # doubling the batch by concatenation leaves the average unchanged
        both = margin_loss(
            Tensor(np.concatenate([lengths, lengths])),
            np.concatenate([labels, labels]),
        ).item()
        assert both == pytest.approx(loss, rel=1e-12)


def test_margin_loss_zero_iff_margins_satisfied():
    with precision("float64"):
        good = margin_loss(
            Tensor([[0.95, 0.05, 0.02]]), np.array([[1.0, 0.0, 0.0]])
        ).item()
        assert good == 0.0
        bad = margin_loss(
            Tensor([[0.95, 0.11, 0.02]]), np.array([[1.0, 0.0, 0.0]])
        ).item()
        assert bad > 0.0


def test_margin_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    with precision("float64"):
        lengths0 = rng.uniform(0.2, 0.8, size=(4, 5))
        labels = np.eye(5)[rng.integers(0, 5, size=4)]

        def f(lengths):
            return margin_loss(lengths, labels)

        assert finite_difference_check(f, Tensor(lengths0)) < 1e-4


def test_margin_params_validation():
    with pytest.raises(ValueError):
        MarginLossParams(m_plus=0.1, m_minus=0.9)
    with pytest.raises(ValueError):
        MarginLossParams(lambda_down=0.0)


def test_capsule_norm_matches_numpy():
    rng = np.random.default_rng(11)
    v = rng.normal(size=(3, 4, 6))
    with precision("float64"):
        got = capsule_norm(Tensor(v)).data
    assert np.allclose(got, np.sqrt((v * v).sum(-1) + NORM_EPS), atol=1e-12)
