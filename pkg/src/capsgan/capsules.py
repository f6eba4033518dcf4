"""Capsule primitives: squash, primary capsules, dynamic routing, margin loss.

A capsule is a vector of activations whose direction encodes entity pose and
whose length encodes presence probability; squash bounds every length below
one.  Routing iteratively distributes each input capsule's unit budget over
output capsules by softmax of accumulated agreement, and is differentiated
through all iterations (coupling coefficients are not detached).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .tensor import NORM_EPS, ShapeError, Tensor


@dataclass
class MarginLossParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.m_minus < self.m_plus < 1.0):
            raise ValueError("need 0 < m_minus < m_plus < 1")
        if self.lambda_down <= 0.0:
            raise ValueError("lambda_down must be > 0")


def _eps(x):
    return Tensor(np.array(NORM_EPS, dtype=x.data.dtype))


def capsule_norm(v, axis=-1, keepdims=False):
    """Stabilized L2 norm sqrt(sum(v^2) + eps); differentiable at 0."""
    sq = T.reduce_sum(T.mul(v, v), axis=axis, keepdims=keepdims)
    return T.sqrt(T.add(sq, _eps(v)))


def squash(s, axis=-1):
    """v = (|s|^2 / (1 + |s|^2)) * s / |s| with the stabilized norm, so a
    zero vector maps to a zero vector and every output norm is below 1."""
    sq = T.reduce_sum(T.mul(s, s), axis=axis, keepdims=True)
    norm = T.sqrt(T.add(sq, _eps(s)))
    one = Tensor(np.array(1.0, dtype=s.data.dtype))
    scale = T.div(T.div(sq, T.add(one, sq)), norm)
    return T.mul(s, scale)


def primary_capsules(features, kernel, bias, capsule_dim, stride=2, padding=0):
    """Convolution whose output channels are regrouped into capsule_dim-sized
    vectors at every spatial position, then squashed.  No routing."""
    out = layers.conv2d(features, kernel, bias, stride=stride, padding=padding)
    n, c, h, w = out.shape
    if c % capsule_dim != 0:
        raise ShapeError(f"{c} channels not divisible by capsule_dim {capsule_dim}")
    groups = c // capsule_dim
    caps = T.reshape(out, (n, groups, capsule_dim, h, w))
    caps = T.transpose(caps, (0, 1, 3, 4, 2))
    caps = T.reshape(caps, (n, groups * h * w, capsule_dim))
    return squash(caps, axis=-1)


def _softmax_over_outputs(b):
    """Softmax along the output-capsule axis of (batch, in, out) logits.
    The max shift is a constant: softmax is shift-invariant, so gradients
    are unchanged while exp stays in range."""
    shift = Tensor(b.data.max(axis=2, keepdims=True), dtype=b.data.dtype)
    e = T.exp(T.sub(b, T.broadcast_to(shift, b.shape)))
    total = T.reduce_sum(e, axis=2, keepdims=True)
    return T.div(e, T.broadcast_to(total, e.shape))


def dynamic_routing(u, weights, iterations=3, apply_final_squash=True,
                    return_couplings=False):
    """Route (batch, num_in, in_dim) capsules through W of shape
    (num_in, num_out, out_dim, in_dim).

    Predictions u_hat = W u are computed once.  Each round takes the softmax
    of the agreement logits over output capsules, forms the weighted sum
    s_j, squashes it to v_j, and adds <u_hat, v_j> to the logits.  Returns
    v of the last round, or the raw unsquashed s when apply_final_squash is
    off (the critic head reads the norm of that raw capsule).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n, num_in, in_dim = u.shape
    if weights.ndim != 4 or weights.shape[0] != num_in or weights.shape[3] != in_dim:
        raise ShapeError(
            f"routing weights {weights.shape} do not fit input {u.shape}"
        )
    num_out, out_dim = weights.shape[1], weights.shape[2]

    u_col = T.reshape(u, (n, num_in, 1, in_dim, 1))
    u_hat = T.reshape(
        T.matmul(weights, u_col), (n, num_in, num_out, out_dim)
    )

    b = Tensor(np.zeros((n, num_in, num_out), dtype=u.data.dtype))
    couplings = []
    out = None
    for rnd in range(iterations):
        c = _softmax_over_outputs(b)
        if return_couplings:
            couplings.append(np.array(c.data, copy=True))
        weighted = T.mul(T.reshape(c, (n, num_in, num_out, 1)), u_hat)
        s = T.reduce_sum(weighted, axis=1)
        last = rnd == iterations - 1
        if last:
            out = squash(s, axis=-1) if apply_final_squash else s
        else:
            v = squash(s, axis=-1)
            agreement = T.reduce_sum(
                T.mul(u_hat, T.reshape(v, (n, 1, num_out, out_dim))), axis=3
            )
            b = T.add(b, agreement)
    if return_couplings:
        return out, couplings
    return out


def margin_loss(lengths, labels, params=None):
    """Hinge-style per-class capsule-length loss, averaged over the batch:
    present classes are pushed above m_plus, absent ones below m_minus with
    down-weighting lambda_down."""
    params = params or MarginLossParams()
    if isinstance(labels, Tensor):
        labels = labels.data
    labels = np.asarray(labels, dtype=lengths.data.dtype)
    if labels.shape != lengths.shape:
        raise ShapeError(
            f"labels {labels.shape} do not match capsule lengths {lengths.shape}"
        )
    t = Tensor(labels, dtype=lengths.data.dtype)
    one = Tensor(np.array(1.0, dtype=lengths.data.dtype))
    m_plus = Tensor(np.array(params.m_plus, dtype=lengths.data.dtype))
    m_minus = Tensor(np.array(params.m_minus, dtype=lengths.data.dtype))
    lam = Tensor(np.array(params.lambda_down, dtype=lengths.data.dtype))

    present = T.maximum_with_constant(T.sub(T.broadcast_to(m_plus, lengths.shape), lengths), 0.0)
    absent = T.maximum_with_constant(T.sub(lengths, T.broadcast_to(m_minus, lengths.shape)), 0.0)
    per_class = T.add(
        T.mul(t, T.mul(present, present)),
        T.mul(T.mul(T.sub(T.broadcast_to(one, t.shape), t), lam), T.mul(absent, absent)),
    )
    return T.reduce_mean(T.reduce_sum(per_class, axis=1))
