"""
Minimal reverse-mode differentiation over numpy arrays.

Values are numpy arrays (real or complex). A complex array is treated as
a pair of real arrays: for a real scalar loss ``L`` the stored adjoint of
a complex value ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``. Every adjoint rule
below is written in that convention, so the gradient with respect to a
real parameter is always the ordinary real derivative.

Operations accept either plain arrays or :class:`Var` handles. When no
argument is a :class:`Var` the operation simply returns the numpy result,
which lets the solvers run the same code with or without a tape.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "AutodiffError", "ShapeError", "IllConditionedError", "Tape", "Var",
    "ParamVector", "CMat", "backward", "finite_difference_gradient",
    "add", "sub", "mul", "div", "scale", "matmul", "hermitian_transpose",
    "transpose", "conj", "complex_inverse", "trace_real", "abs_squared",
    "real", "relu", "identity", "softmax", "log2_1p_ratio",
    "batch_normalize", "gather_mask", "outer_product", "sum", "reshape",
    "power", "value_of", "diag_part",
]

INVERSE_RCOND = 1e-12
LOG_GUARD = 1e-15


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shp = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shp}")


class IllConditionedError(AutodiffError, np.linalg.LinAlgError):
    """Raised by ``complex_inverse`` when ``s_min < 1e-12 * s_max``."""

    def __init__(self, ratio):
        self.ratio = ratio
        super().__init__(
            f"complex_inverse: matrix is ill-conditioned "
            f"(s_min/s_max = {ratio:.3e} < {INVERSE_RCOND:g})")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape, like_complex):
    """Reduce ``grad`` to ``shape`` and drop the imaginary part for real inputs."""
    if grad.shape != shape:
        ndiff = grad.ndim - len(shape)
        if ndiff > 0:
            grad = grad.sum(axis=tuple(range(ndiff)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
        if axes:
            grad = grad.sum(axis=axes, keepdims=True)
        grad = grad.reshape(shape)
    if not like_complex and np.iscomplexobj(grad):
        grad = grad.real
    return grad


def _ht(a):
    return np.conj(np.swapaxes(a, -1, -2))


# ---------------------------------------------------------------------------
# primitive rules: forward(values, payload) -> (value, ctx)
#                  backward(g, values, value, ctx, payload) -> input grads
# ---------------------------------------------------------------------------

def _f_add(vals, p):
    a, b = vals
    try:
        return a + b, None
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None


def _b_add(g, vals, out, ctx, p):
    return g, g


def _f_sub(vals, p):
    a, b = vals
    try:
        return a - b, None
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None


def _b_sub(g, vals, out, ctx, p):
    return g, -g


def _f_mul(vals, p):
    a, b = vals
    try:
        return a * b, None
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None


def _b_mul(g, vals, out, ctx, p):
    a, b = vals
    return g * np.conj(b), np.conj(a) * g


def _f_div(vals, p):
    a, b = vals
    try:
        return a / b, None
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None


def _b_div(g, vals, out, ctx, p):
    a, b = vals
    inv_b = 1.0 / b
    return g * np.conj(inv_b), -g * np.conj(out * inv_b)


def _f_scale(vals, p):
    return vals[0] * p, None


def _b_scale(g, vals, out, ctx, p):
    return (g * np.conj(p),)


def _f_matmul(vals, p):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        return np.matmul(a, b), None
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None


def _b_matmul(g, vals, out, ctx, p):
    a, b = vals
    return np.matmul(g, _ht(b)), np.matmul(_ht(a), g)


def _f_ht(vals, p):
    a = vals[0]
    if a.ndim < 2:
        raise ShapeError("hermitian_transpose", a.shape)
    return _ht(a), None


def _b_ht(g, vals, out, ctx, p):
    return (_ht(g),)


def _f_transpose(vals, p):
    a = vals[0]
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return np.swapaxes(a, -1, -2), None


def _b_transpose(g, vals, out, ctx, p):
    return (np.swapaxes(g, -1, -2),)


def _f_conj(vals, p):
    return np.conj(vals[0]), None


def _b_conj(g, vals, out, ctx, p):
    return (np.conj(g),)


def _f_inverse(vals, p):
    a = vals[0]
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("complex_inverse", a.shape)
    s = np.linalg.svd(a, compute_uv=False)
    ratio = np.min(s[..., -1] / np.maximum(s[..., 0], np.finfo(float).tiny))
    if not np.isfinite(ratio) or ratio < INVERSE_RCOND:
        raise IllConditionedError(float(ratio))
    return np.linalg.inv(a), None


def _b_inverse(g, vals, out, ctx, p):
    c_h = _ht(out)
    return (-np.matmul(np.matmul(c_h, g), c_h),)


def _f_trace_real(vals, p):
    a = vals[0]
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("trace_real", a.shape)
    return np.real(np.trace(a, axis1=-2, axis2=-1)), None


def _b_trace_real(g, vals, out, ctx, p):
    n = vals[0].shape[-1]
    return (np.asarray(g)[..., None, None] * np.eye(n),)


def _f_abs2(vals, p):
    a = vals[0]
    if np.iscomplexobj(a):
        return a.real ** 2 + a.imag ** 2, None
    return a * a, None


def _b_abs2(g, vals, out, ctx, p):
    return (2.0 * vals[0] * g,)


def _f_real(vals, p):
    return np.real(vals[0]).copy(), None


def _b_real(g, vals, out, ctx, p):
    return (g,)


def _f_relu(vals, p):
    a = vals[0]
    mask = a > 0
    return np.where(mask, a, 0.0), mask


def _b_relu(g, vals, out, ctx, p):
    return (g * ctx,)


def _f_identity(vals, p):
    return vals[0], None


def _b_identity(g, vals, out, ctx, p):
    return (g,)


def _f_softmax(vals, p):
    a = vals[0]
    z = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True), None


def _b_softmax(g, vals, out, ctx, p):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


_LN2 = np.log(2.0)


def _f_log2_1p_ratio(vals, p):
    num, den = vals
    try:
        x = num / den
    except ValueError:
        raise ShapeError("log2_1p_ratio", num.shape, den.shape) from None
    x = np.maximum(x, -1.0 + LOG_GUARD)
    return np.log1p(x) / _LN2, None


def _b_log2_1p_ratio(g, vals, out, ctx, p):
    num, den = vals
    tot = den + num
    return g / (tot * _LN2), -g * num / (den * tot * _LN2)


def _f_batchnorm(vals, p):
    x, gamma, beta = vals
    if x.ndim != 2 or gamma.shape != x.shape[1:] or beta.shape != x.shape[1:]:
        raise ShapeError("batch_normalize", x.shape, gamma.shape, beta.shape)
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + p)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, mean, var)


def _b_batchnorm(g, vals, out, ctx, p):
    x, gamma, beta = vals
    xhat, inv_std, _, _ = ctx
    n = x.shape[0]
    dxhat = g * gamma
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    return dx, np.sum(g * xhat, axis=0), g.sum(axis=0)


def _f_gather(vals, p):
    x = vals[0]
    idx = p
    if idx.size and (idx.max() >= x.shape[-1] or idx.min() < -1):
        raise ShapeError("gather_mask", x.shape, idx.shape)
    pad = np.zeros(x.shape[:-1] + (1,), dtype=x.dtype)
    xp = np.concatenate([x, pad], axis=-1)
    return xp[..., np.where(idx < 0, x.shape[-1], idx)], None


def _b_gather(g, vals, out, ctx, p):
    x = vals[0]
    n = x.shape[-1]
    lead = x.shape[:-1]
    idx = np.where(p < 0, n, p).ravel()
    g2 = np.reshape(g, (int(np.prod(lead, dtype=int)), idx.size))
    acc = np.zeros((g2.shape[0], n + 1), dtype=g.dtype)
    np.add.at(acc, (slice(None), idx), g2)
    return (acc[:, :n].reshape(x.shape),)


def _f_outer(vals, p):
    a, b = vals
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError("outer_product", a.shape, b.shape)
    return a[..., :, None] * np.conj(b)[..., None, :], None


def _b_outer(g, vals, out, ctx, p):
    a, b = vals
    ga = np.einsum("...ij,...j->...i", g, b)
    gb = np.einsum("...ij,...i->...j", np.conj(g), a)
    return ga, gb


def _f_sum(vals, p):
    axis, keepdims = p
    return np.sum(vals[0], axis=axis, keepdims=keepdims), None


def _b_sum(g, vals, out, ctx, p):
    axis, keepdims = p
    shape = vals[0].shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _f_reshape(vals, p):
    try:
        return np.reshape(vals[0], p), None
    except ValueError:
        raise ShapeError("reshape", vals[0].shape, p) from None


def _b_reshape(g, vals, out, ctx, p):
    return (np.reshape(g, vals[0].shape),)


def _f_power(vals, p):
    return np.power(vals[0], p), None


def _b_power(g, vals, out, ctx, p):
    return (g * p * np.power(vals[0], p - 1.0),)


_RULES: dict[str, tuple[Callable, Callable]] = {
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "div": (_f_div, _b_div),
    "scale": (_f_scale, _b_scale),
    "matmul": (_f_matmul, _b_matmul),
    "hermitian_transpose": (_f_ht, _b_ht),
    "transpose": (_f_transpose, _b_transpose),
    "conj": (_f_conj, _b_conj),
    "complex_inverse": (_f_inverse, _b_inverse),
    "trace_real": (_f_trace_real, _b_trace_real),
    "abs_squared": (_f_abs2, _b_abs2),
    "real": (_f_real, _b_real),
    "relu": (_f_relu, _b_relu),
    "identity": (_f_identity, _b_identity),
    "softmax": (_f_softmax, _b_softmax),
    "log2_1p_ratio": (_f_log2_1p_ratio, _b_log2_1p_ratio),
    "batch_normalize": (_f_batchnorm, _b_batchnorm),
    "gather_mask": (_f_gather, _b_gather),
    "outer_product": (_f_outer, _b_outer),
    "sum": (_f_sum, _b_sum),
    "reshape": (_f_reshape, _b_reshape),
    "power": (_f_power, _b_power),
}


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "inputs", "value", "ctx", "payload", "needs_grad", "name")

    def __init__(self, op, inputs, value, ctx, payload, needs_grad, name=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.payload = payload
        self.needs_grad = needs_grad
        self.name = name


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so the list is always in
    topological order. A tape is not thread-safe; use one tape per thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name=None) -> "Var":
        """Register a differentiable input."""
        value = np.array(value, dtype=np.result_type(value, float))
        self.nodes.append(_Node("leaf", (), value, None, None, True, name))
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> "Var":
        value = np.asarray(value)
        if value.dtype.kind not in "fc":
            value = value.astype(float)
        self.nodes.append(_Node("const", (), value, None, None, False))
        return Var(self, len(self.nodes) - 1)

    def record(self, op_kind: str, inputs: Iterable[int], payload=None) -> int:
        """Evaluate ``op_kind`` on the given node ids and append the result."""
        try:
            fwd, _ = _RULES[op_kind]
        except KeyError:
            raise AutodiffError(f"unknown op {op_kind!r}") from None
        inputs = tuple(inputs)
        vals = [self.nodes[i].value for i in inputs]
        value, ctx = fwd(vals, payload)
        needs = any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(_Node(op_kind, inputs, np.asarray(value), ctx, payload, needs))
        return len(self.nodes) - 1

    def var(self, node_id: int) -> "Var":
        return Var(self, node_id)


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, op={node.op}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return scale(self, -1.0)


def value_of(x):
    """Forward value of a :class:`Var`, or ``x`` itself."""
    return x.value if isinstance(x, Var) else x


def _as_operand(a):
    if np.isscalar(a):
        return np.asarray(a, dtype=np.result_type(a, float))
    return np.asarray(a)


def _apply(op, args, payload=None):
    tape = None
    for a in args:
        if isinstance(a, Var):
            tape = a.tape
            break
    if tape is None:
        vals = [a if type(a) is np.ndarray else _as_operand(a) for a in args]
        return _RULES[op][0](vals, payload)[0]
    ids = []
    for a in args:
        if isinstance(a, Var):
            if a.tape is not tape:
                raise AutodiffError(f"{op}: operands live on different tapes")
            ids.append(a.id)
        else:
            ids.append(tape.const(a).id)
    return Var(tape, tape.record(op, ids, payload))


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def div(a, b):
    return _apply("div", (a, b))


def scale(a, factor):
    """Multiply by a constant (not differentiated)."""
    return _apply("scale", (a,), factor)


def matmul(a, b):
    return _apply("matmul", (a, b))


def hermitian_transpose(a):
    return _apply("hermitian_transpose", (a,))


def transpose(a):
    return _apply("transpose", (a,))


def conj(a):
    return _apply("conj", (a,))


def complex_inverse(a):
    return _apply("complex_inverse", (a,))


def trace_real(a):
    return _apply("trace_real", (a,))


def abs_squared(a):
    return _apply("abs_squared", (a,))


def real(a):
    return _apply("real", (a,))


def relu(a):
    return _apply("relu", (a,))


def identity(a):
    return _apply("identity", (a,))


def softmax(a):
    """Softmax over the last axis (max-subtracted)."""
    return _apply("softmax", (a,))


def log2_1p_ratio(num, den):
    """``log2(1 + num / den)`` with the ratio clamped at ``-1 + 1e-15``."""
    return _apply("log2_1p_ratio", (num, den))


def batch_normalize(x, gamma, beta, eps=1e-5):
    """Normalize each column of ``x`` with its batch mean and (biased) variance."""
    return _apply("batch_normalize", (x, gamma, beta), eps)


def gather_mask(x, index):
    """Gather along the last axis; ``index == -1`` yields 0."""
    return _apply("gather_mask", (x,), np.asarray(index, dtype=int))


def outer_product(a, b):
    """``a b^H`` over the last axis."""
    return _apply("outer_product", (a, b))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return _apply("sum", (a,), (axis, keepdims))


def reshape(a, shape):
    return _apply("reshape", (a,), tuple(shape))


def power(a, exponent):
    return _apply("power", (a,), float(exponent))


def diag_part(a):
    """Diagonal of a square matrix (last two axes) as a vector."""
    n = value_of(a).shape[-1]
    lead = value_of(a).shape[:-2]
    flat = reshape(a, lead + (n * n,))
    return gather_mask(flat, np.arange(n) * (n + 1))


# ---------------------------------------------------------------------------
# backward and the finite-difference oracle
# ---------------------------------------------------------------------------

def backward(tape: Tape, root) -> dict[int, np.ndarray]:
    """Reverse-mode gradient of a scalar ``root`` with respect to every leaf.

    Returns
    -------
    dict
        Maps leaf node id to the gradient array (same shape and dtype kind
        as the leaf value).
    """
    root_id = root.id if isinstance(root, Var) else int(root)
    nodes = tape.nodes
    if nodes[root_id].value.size != 1:
        raise AutodiffError(
            f"backward needs a scalar root, got shape {nodes[root_id].value.shape}")
    grads: dict[int, np.ndarray] = {root_id: np.ones_like(nodes[root_id].value, dtype=float)}
    leaves = {}
    for nid in range(root_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if node.op == "leaf":
            leaves[nid] = _unbroadcast(g, node.value.shape, np.iscomplexobj(node.value))
            continue
        if not node.needs_grad or node.op == "const":
            continue
        vals = [nodes[i].value for i in node.inputs]
        in_grads = _RULES[node.op][1](g, vals, node.value, node.ctx, node.payload)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not nodes[i].needs_grad:
                continue
            inp = nodes[i].value
            gi = _unbroadcast(np.asarray(gi), inp.shape, np.iscomplexobj(inp))
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    for nid, node in enumerate(nodes[: root_id + 1]):
        if node.op == "leaf" and nid not in leaves:
            leaves[nid] = np.zeros_like(node.value)
    return leaves


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta, eps=1e-5):
    """Central-difference gradient of a scalar function of a real vector."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=float)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(theta))
        flat[i] = old - eps
        fm = float(f(theta))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise AutodiffError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class CMat:
    """Real/imaginary pair view of a complex matrix."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=float)
        self.im = np.asarray(self.im, dtype=float)
        if self.re.shape != self.im.shape:
            raise ShapeError("CMat", self.re.shape, self.im.shape)

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self):
        return self.re + 1j * self.im

    def is_hermitian(self, tol=1e-12):
        s = max(float(np.max(np.abs(self.re), initial=0.0)),
                float(np.max(np.abs(self.im), initial=0.0)), 1.0)
        return (np.allclose(self.re, self.re.T, rtol=0, atol=tol * s)
                and np.allclose(self.im, -self.im.T, rtol=0, atol=tol * s))


class ParamVector:
    """Flat real parameter vector with a registry of named blocks.

    Parameters
    ----------
    blocks : sequence of (name, shape) or (name, shape, trainable)
        Block layout in storage order. Non-trainable blocks (e.g. running
        statistics) are stored alongside but receive no gradient.
    data : array_like, optional
        Initial flat values; zeros if omitted.
    """

    def __init__(self, blocks, data=None):
        self.registry: "OrderedDict[str, tuple[tuple[int, ...], slice, bool]]" = OrderedDict()
        offset = 0
        for spec in blocks:
            name, shape = spec[0], tuple(int(s) for s in spec[1])
            trainable = bool(spec[2]) if len(spec) > 2 else True
            if name in self.registry:
                raise ValueError(f"duplicate block {name!r}")
            size = int(np.prod(shape, dtype=int))
            self.registry[name] = (shape, slice(offset, offset + size), trainable)
            offset += size
        self.size = offset
        if data is None:
            self.data = np.zeros(offset)
        else:
            data = np.array(data, dtype=float).reshape(-1)
            if data.size != offset:
                raise ValueError(f"expected {offset} values, got {data.size}")
            self.data = data

    @property
    def layout(self):
        return [(n, s, t) for n, (s, _, t) in self.registry.items()]

    def copy(self, data=None):
        return ParamVector(self.layout, self.data.copy() if data is None else data)

    def __getitem__(self, name) -> np.ndarray:
        shape, sl, _ = self.registry[name]
        return self.data[sl].reshape(shape)

    def __setitem__(self, name, value):
        shape, sl, _ = self.registry[name]
        value = np.asarray(value, dtype=float)
        if value.shape != shape:
            raise ShapeError(f"ParamVector[{name!r}]", value.shape, shape)
        self.data[sl] = value.reshape(-1)

    def blocks(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, self[n]) for n in self.registry)

    def unpack(self):
        return self.blocks()

    @classmethod
    def pack(cls, layout, arrays: Mapping[str, np.ndarray]):
        pv = cls(layout)
        for name in pv.registry:
            pv[name] = arrays[name]
        return pv

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for _, sl, t in self.registry.values():
            mask[sl] = t
        return mask

    def leaves(self, tape: Tape):
        """Trainable blocks as tape leaves, buffers as plain arrays."""
        out = OrderedDict()
        for name, (_, _, t) in self.registry.items():
            out[name] = tape.leaf(self[name].copy(), name=name) if t else self[name].copy()
        return out

    def flatten_grads(self, leaves, grads: Mapping[int, np.ndarray]) -> np.ndarray:
        """Pack per-leaf gradients from :func:`backward` into a flat vector."""
        flat = np.zeros(self.size)
        for name, (_, sl, t) in self.registry.items():
            if t:
                flat[sl] = np.asarray(grads[leaves[name].id], dtype=float).reshape(-1)
        return flat
