"""Dense n-d tensors with taped reverse-mode automatic differentiation.

Every operation is one of a small set of primitives whose derivative rules
are themselves written in terms of the same primitives.  A gradient pass
therefore appends ordinary nodes to the tape instead of mutating it, and a
second gradient pass over the appended region is well defined.  That is
what makes the gradient-penalty term (a loss containing the norm of an
input gradient) differentiable with respect to the critic parameters.

Conventions baked in here:

* tensors are immutable once created; a Tape belongs to one thread and
  one training step,
* every forward result is checked for NaN/Inf and raises instead of
  propagating silently,
* maximum_with_constant takes derivative 0 exactly at the kink,
* default element type is float32; wrap oracle-grade code in
  ``precision("float64")``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

NORM_EPS = 1e-9  # epsilon used inside every differentiated L2 norm


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operand shapes illegal for the attempted operation."""


class NonFiniteError(TensorError):
    """A forward operation produced NaN or Inf."""


_state = threading.local()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype):
    _state.dtype = np.dtype(dtype).type


@contextmanager
def precision(dtype):
    """Temporarily switch the default element type ("float64" for oracles)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextmanager
def paused():
    """Suspend recording: ops inside run eagerly and leave the tape alone."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


class Tape:
    """Creation-ordered record of every tensor built while it is open.

    The order is topological by construction (parents are created before
    children), which is all reverse-mode accumulation needs.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def _append(self, t):
        t.node_id = len(self.nodes)
        self.nodes.append(t)

    def replay(self):
        """Recompute every non-leaf node from its parents and verify the
        stored values bit for bit.  Returns the number of nodes checked."""
        checked = 0
        for t in self.nodes:
            if t.op == "leaf":
                continue
            with np.errstate(all="ignore"):
                again = _KERNELS[t.op]([p.data for p in t.parents], t.attrs)
            if again.tobytes() != t.data.tobytes():
                raise TensorError(f"tape replay diverged at node {t.node_id} ({t.op})")
            checked += 1
        return checked


class Tensor:
    """Immutable dense array, optionally linked into the active Tape."""

    __slots__ = ("data", "op", "parents", "attrs", "node_id")

    def __init__(self, data, dtype=None):
        # floating arrays and numpy scalars keep their precision; everything
        # else (lists, python scalars, integer arrays) takes the session
        # default
        if (dtype is None and isinstance(data, (np.ndarray, np.generic))
                and data.dtype.kind == "f"):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        _check_extents(arr.shape)
        _check_finite(arr, "leaf")
        self.data = arr
        self.op = "leaf"
        self.parents = ()
        self.attrs = None
        self.node_id = None
        tape = active_tape()
        if tape is not None:
            tape._append(self)

    # -- construction used by the primitives ------------------------------

    @classmethod
    def _node(cls, data, op, parents, attrs):
        t = cls.__new__(cls)
        t.data = data
        t.op = op
        t.parents = parents
        t.attrs = attrs
        t.node_id = None
        tape = active_tape()
        if tape is not None:
            tape._append(t)
        return t

    # -- basic introspection ----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    def detach(self):
        """A leaf sharing this tensor's values; gradient flow stops here."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.op = "leaf"
        t.parents = ()
        t.attrs = None
        t.node_id = None
        tape = active_tape()
        if tape is not None:
            tape._append(t)
        return t

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)


def constant(value, dtype=None):
    return Tensor(np.asarray(value, dtype=dtype or default_dtype()), dtype=dtype)


def zeros_like(t):
    return Tensor(np.zeros(t.shape, dtype=t.data.dtype), dtype=t.data.dtype)


def _check_extents(shape):
    if any(s < 1 for s in shape):
        raise ShapeError(f"tensor extents must all be >= 1, got {shape}")


def _check_finite(arr, op):
    # min/max both propagate NaN and expose Inf; avoids a bool temporary.
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFiniteError(f"non-finite result out of op '{op}'")


# ---------------------------------------------------------------------------
# forward kernels (single source of truth, reused by Tape.replay)
# ---------------------------------------------------------------------------


def _k_add(xs, attrs):
    return np.add(xs[0], xs[1])


def _k_sub(xs, attrs):
    return np.subtract(xs[0], xs[1])


def _k_mul(xs, attrs):
    return np.multiply(xs[0], xs[1])


def _k_div(xs, attrs):
    return np.divide(xs[0], xs[1])


def _k_matmul(xs, attrs):
    return np.matmul(xs[0], xs[1])


def _k_reshape(xs, attrs):
    return np.ascontiguousarray(xs[0].reshape(attrs["shape"]))


def _k_transpose(xs, attrs):
    return np.ascontiguousarray(xs[0].transpose(attrs["axes"]))


def _k_broadcast(xs, attrs):
    return np.ascontiguousarray(np.broadcast_to(xs[0], attrs["shape"]))


def _k_reduce_sum(xs, attrs):
    return np.asarray(xs[0].sum(axis=attrs["axis"], keepdims=attrs["keepdims"]))


def _k_reduce_mean(xs, attrs):
    return np.asarray(xs[0].mean(axis=attrs["axis"], keepdims=attrs["keepdims"]))


def _k_power(xs, attrs):
    return np.power(xs[0], xs[0].dtype.type(attrs["exponent"]))


def _k_sqrt(xs, attrs):
    return np.sqrt(xs[0])


def _k_exp(xs, attrs):
    return np.exp(xs[0])


def _k_log(xs, attrs):
    return np.log(xs[0])


def _k_tanh(xs, attrs):
    return np.tanh(xs[0])


def _k_maxc(xs, attrs):
    return np.maximum(xs[0], xs[0].dtype.type(attrs["constant"]))


def _k_concat(xs, attrs):
    return np.concatenate(xs, axis=attrs["axis"])


def _k_slice(xs, attrs):
    sel = tuple(slice(b, e) for b, e in zip(attrs["starts"], attrs["stops"]))
    return np.ascontiguousarray(xs[0][sel])


def _k_pad(xs, attrs):
    width = list(zip(attrs["before"], attrs["after"]))
    return np.pad(xs[0], width, mode="constant")


def _k_gather(xs, attrs):
    return np.take(xs[0], attrs["indices"], axis=attrs["axis"])


def _k_scatter_add(xs, attrs):
    src = xs[0]
    axis, size, idx = attrs["axis"], attrs["size"], attrs["indices"]
    if src.ndim == 2 and axis == 1:
        # fast path used by the convolution adjoints; bincount accumulates
        # in float64 and is deterministic
        out = np.empty((src.shape[0], size), dtype=src.dtype)
        for b in range(src.shape[0]):
            out[b] = np.bincount(idx, weights=src[b], minlength=size).astype(
                src.dtype, copy=False
            )
        return out
    moved = np.moveaxis(src, axis, 0)
    acc = np.zeros((size,) + moved.shape[1:], dtype=src.dtype)
    np.add.at(acc, idx, moved)
    return np.ascontiguousarray(np.moveaxis(acc, 0, axis))


_KERNELS = {
    "add": _k_add,
    "sub": _k_sub,
    "mul": _k_mul,
    "div": _k_div,
    "matmul": _k_matmul,
    "reshape": _k_reshape,
    "transpose": _k_transpose,
    "broadcast": _k_broadcast,
    "reduce_sum": _k_reduce_sum,
    "reduce_mean": _k_reduce_mean,
    "power": _k_power,
    "sqrt": _k_sqrt,
    "exp": _k_exp,
    "log": _k_log,
    "tanh": _k_tanh,
    "maximum_with_constant": _k_maxc,
    "concatenate": _k_concat,
    "slice": _k_slice,
    "pad": _k_pad,
    "gather": _k_gather,
    "scatter_add": _k_scatter_add,
}


def _apply(op, parents, attrs):
    try:
        with np.errstate(all="ignore"):
            data = _KERNELS[op]([p.data for p in parents], attrs)
    except ValueError as e:
        raise ShapeError(
            f"op '{op}' rejected shapes {[p.shape for p in parents]}: {e}"
        ) from None
    _check_finite(data, op)
    return Tensor._node(data, op, tuple(parents), attrs)


# ---------------------------------------------------------------------------
# public primitives
# ---------------------------------------------------------------------------


def add(a, b):
    return _apply("add", (a, b), None)


def sub(a, b):
    return _apply("sub", (a, b), None)


def mul(a, b):
    return _apply("mul", (a, b), None)


def div(a, b):
    return _apply("div", (a, b), None)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 on both sides, got {a.shape} @ {b.shape}"
        )
    return _apply("matmul", (a, b), None)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elems) to {shape}")
    _check_extents(shape)
    return _apply("reshape", (x,), {"shape": shape})


def transpose(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for rank {x.ndim}")
    return _apply("transpose", (x,), {"axes": axes})


def broadcast_to(x, shape):
    shape = tuple(int(s) for s in shape)
    _check_extents(shape)
    return _apply("broadcast", (x,), {"shape": shape})


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    return _apply(
        "reduce_sum", (x,), {"axis": _norm_axis(axis, x.ndim), "keepdims": keepdims}
    )


def reduce_mean(x, axis=None, keepdims=False):
    return _apply(
        "reduce_mean", (x,), {"axis": _norm_axis(axis, x.ndim), "keepdims": keepdims}
    )


def power(x, exponent):
    return _apply("power", (x,), {"exponent": float(exponent)})


def sqrt(x):
    return _apply("sqrt", (x,), None)


def exp(x):
    return _apply("exp", (x,), None)


def log(x):
    return _apply("log", (x,), None)


def tanh(x):
    return _apply("tanh", (x,), None)


def maximum_with_constant(x, constant_value):
    return _apply(
        "maximum_with_constant", (x,), {"constant": float(constant_value)}
    )


def concatenate(parts, axis):
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concatenate of zero tensors")
    axis = axis % parts[0].ndim
    return _apply("concatenate", parts, {"axis": axis})


def slice_(x, starts, stops):
    starts = tuple(int(s) for s in starts)
    stops = tuple(int(s) for s in stops)
    if len(starts) != x.ndim or len(stops) != x.ndim:
        raise ShapeError("slice bounds must cover every axis")
    for s, e, d in zip(starts, stops, x.shape):
        if not (0 <= s < e <= d):
            raise ShapeError(f"slice [{starts}:{stops}] out of bounds for {x.shape}")
    return _apply("slice", (x,), {"starts": starts, "stops": stops})


def pad(x, before, after):
    before = tuple(int(b) for b in before)
    after = tuple(int(a) for a in after)
    if len(before) != x.ndim or len(after) != x.ndim:
        raise ShapeError("pad widths must cover every axis")
    if any(b < 0 for b in before) or any(a < 0 for a in after):
        raise ShapeError("pad widths must be >= 0")
    return _apply("pad", (x,), {"before": before, "after": after})


def gather(x, indices, axis):
    axis = axis % x.ndim
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(f"gather indices out of range for axis extent {x.shape[axis]}")
    return _apply("gather", (x,), {"indices": idx, "axis": axis})


def scatter_add(src, indices, axis, size):
    axis = axis % src.ndim
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size != src.shape[axis]:
        raise ShapeError("scatter_add needs one index per slice along axis")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"scatter_add indices out of range for size {size}")
    return _apply(
        "scatter_add", (src,), {"indices": idx, "axis": axis, "size": int(size)}
    )


# ---------------------------------------------------------------------------
# derivative rules, each expressed with the primitives above
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting (graph ops)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    r = reduce_sum(g, axis=axes, keepdims=False) if axes else g
    return reshape(r, shape) if r.shape != shape else r


def _swap_last(t):
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return transpose(t, axes)


def _v_add(node, g):
    a, b = node.parents
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _v_sub(node, g):
    a, b = node.parents
    return [_unbroadcast(g, a.shape), _unbroadcast(mul(g, _lift(-1.0, g)), b.shape)]


def _v_mul(node, g):
    a, b = node.parents
    return [_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)]


def _v_div(node, g):
    a, b = node.parents
    da = _unbroadcast(div(g, b), a.shape)
    db = _unbroadcast(mul(mul(g, div(node, b)), _lift(-1.0, g)), b.shape)
    return [da, db]


def _v_matmul(node, g):
    a, b = node.parents
    return [
        _unbroadcast(matmul(g, _swap_last(b)), a.shape),
        _unbroadcast(matmul(_swap_last(a), g), b.shape),
    ]


def _v_reshape(node, g):
    return [reshape(g, node.parents[0].shape)]


def _v_transpose(node, g):
    axes = node.attrs["axes"]
    inverse = tuple(int(i) for i in np.argsort(axes))
    return [transpose(g, inverse)]


def _v_broadcast(node, g):
    return [_unbroadcast(g, node.parents[0].shape)]


def _v_reduce_sum(node, g):
    x = node.parents[0]
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    if not keepdims:
        held = [1 if i in axis else s for i, s in enumerate(x.shape)]
        g = reshape(g, held)
    return [broadcast_to(g, x.shape)]


def _v_reduce_mean(node, g):
    x = node.parents[0]
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    count = 1
    for a in axis:
        count *= x.shape[a]
    if not keepdims:
        held = [1 if i in axis else s for i, s in enumerate(x.shape)]
        g = reshape(g, held)
    return [mul(broadcast_to(g, x.shape), _lift(1.0 / count, g))]


def _v_power(node, g):
    x = node.parents[0]
    p = node.attrs["exponent"]
    return [mul(g, mul(power(x, p - 1.0), _lift(p, g)))]


def _v_sqrt(node, g):
    return [div(mul(g, _lift(0.5, g)), node)]


def _v_exp(node, g):
    return [mul(g, node)]


def _v_log(node, g):
    return [div(g, node.parents[0])]


def _v_tanh(node, g):
    one = _lift(1.0, g)
    return [mul(g, sub(one, mul(node, node)))]


def _v_maxc(node, g):
    x = node.parents[0]
    c = node.attrs["constant"]
    # strict >: subgradient 0 exactly at the kink; mask is a constant leaf
    mask = Tensor((x.data > c).astype(x.data.dtype), dtype=x.data.dtype)
    return [mul(g, mask)]


def _v_concat(node, g):
    axis = node.attrs["axis"]
    grads = []
    offset = 0
    for p in node.parents:
        starts = [0] * g.ndim
        stops = list(g.shape)
        starts[axis] = offset
        stops[axis] = offset + p.shape[axis]
        grads.append(slice_(g, starts, stops))
        offset += p.shape[axis]
    return grads


def _v_slice(node, g):
    x = node.parents[0]
    starts, stops = node.attrs["starts"], node.attrs["stops"]
    before = starts
    after = tuple(d - e for d, e in zip(x.shape, stops))
    return [pad(g, before, after)]


def _v_pad(node, g):
    x = node.parents[0]
    before = node.attrs["before"]
    starts = before
    stops = tuple(b + d for b, d in zip(before, x.shape))
    return [slice_(g, starts, stops)]


def _v_gather(node, g):
    x = node.parents[0]
    return [
        scatter_add(g, node.attrs["indices"], node.attrs["axis"], x.shape[node.attrs["axis"]])
    ]


def _v_scatter_add(node, g):
    return [gather(g, node.attrs["indices"], node.attrs["axis"])]


_VJPS = {
    "add": _v_add,
    "sub": _v_sub,
    "mul": _v_mul,
    "div": _v_div,
    "matmul": _v_matmul,
    "reshape": _v_reshape,
    "transpose": _v_transpose,
    "broadcast": _v_broadcast,
    "reduce_sum": _v_reduce_sum,
    "reduce_mean": _v_reduce_mean,
    "power": _v_power,
    "sqrt": _v_sqrt,
    "exp": _v_exp,
    "log": _v_log,
    "tanh": _v_tanh,
    "maximum_with_constant": _v_maxc,
    "concatenate": _v_concat,
    "slice": _v_slice,
    "pad": _v_pad,
    "gather": _v_gather,
    "scatter_add": _v_scatter_add,
}


# ---------------------------------------------------------------------------
# reverse-mode accumulation
# ---------------------------------------------------------------------------


def grad(output, wrt, create_graph=False, tape=None):
    """Gradients of a scalar `output` with respect to each tensor in `wrt`.

    With ``create_graph=True`` the derivative computation is recorded on the
    same tape, so the returned tensors can be differentiated again (the
    second-order path the gradient penalty needs).  Tensors unreachable from
    `output` get an exact zero gradient rather than an error.
    """
    tape = tape or active_tape()
    if tape is None:
        raise TensorError("grad needs an open Tape")
    if output.node_id is None or tape.nodes[output.node_id] is not output:
        raise TensorError("grad output is not on the tape")
    if output.ndim != 0:
        raise ShapeError(f"grad output must be a scalar, got shape {output.shape}")

    wrt = list(wrt)
    wanted = {}
    for w in wrt:
        wanted.setdefault(id(w), None)

    cotangent = {}
    context = _null_context() if create_graph else paused()
    with context:
        seed = Tensor(np.ones((), dtype=output.data.dtype), dtype=output.data.dtype)
        cotangent[id(output)] = seed
        for i in range(output.node_id, -1, -1):
            node = tape.nodes[i]
            g = cotangent.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                wanted[id(node)] = g
            if node.op == "leaf":
                continue
            for parent, contrib in zip(node.parents, _VJPS[node.op](node, g)):
                held = cotangent.get(id(parent))
                cotangent[id(parent)] = contrib if held is None else add(held, contrib)

        results = []
        for w in wrt:
            g = wanted.get(id(w)) or cotangent.get(id(w))
            if g is None:
                g = zeros_like(w)
            results.append(g)
    return results


@contextmanager
def _null_context():
    yield


def finite_difference_check(f, x, epsilon=1e-5):
    """Max relative error between the taped gradient of ``f`` at ``x`` and a
    central finite difference, |analytic - numeric| / max(1, |analytic|).

    ``f`` maps one Tensor to a scalar Tensor and must be deterministic.
    Run under ``precision("float64")`` for oracle-grade tolerances.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    base = np.array(x.data, copy=True)
    with Tape() as tape:
        leaf = Tensor(base, dtype=base.dtype)
        out = f(leaf)
        if out.ndim != 0:
            raise ShapeError("finite_difference_check needs a scalar-valued f")
        (analytic,) = grad(out, [leaf], tape=tape)
    analytic = np.asarray(analytic.data, dtype=np.float64)

    def value_at(point):
        # fresh throwaway tape per evaluation so f may itself call grad
        with Tape():
            return f(Tensor(point.copy(), dtype=point.dtype)).item()

    numeric = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + epsilon
        hi = value_at(base)
        flat[i] = keep - epsilon
        lo = value_at(base)
        flat[i] = keep
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * epsilon)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
