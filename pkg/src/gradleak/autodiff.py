"""Reverse-mode automatic differentiation on dense float64 arrays.

The backward pass is itself expressed with the same differentiable
primitives, so gradients can be differentiated again.  That is the
mechanism behind the matrix-free mixed second derivatives used
throughout this package: the product of the input/parameter Jacobian
with a vector is just the gradient of an inner product of a gradient.

Every value is a `Var` wrapping a float64 ndarray.  `grad(out, [a, b])`
returns cotangents as `Var`s belonging to the same graph, so calling
`grad` on something built from them yields exact second derivatives.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the compute graph: a value plus how it was produced."""

    __slots__ = ("data", "parents", "vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, leaf={self.vjp is None})"


def as_var(x):
    """Lift plain arrays/scalars to constant leaves."""
    return x if isinstance(x, Var) else Var(x)


def check_finite(v, where=""):
    if not np.all(np.isfinite(v.data)):
        raise FloatingPointError(f"non-finite value encountered{' in ' + where if where else ''}")
    return v


# ---------------------------------------------------------------------------
# primitives


def _sum_to(g, shape):
    """Reduce `g` back to `shape` after numpy broadcasting (differentiable)."""
    if g.shape == shape:
        return g
    return sum_to(g, shape)


def sum_to(a, shape):
    a = as_var(a)
    ndiff = a.data.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, n in enumerate(shape) if n == 1 and a.data.shape[i + ndiff] != 1
    )
    data = a.data.sum(axis=axes, keepdims=False).reshape(shape)
    return Var(data, (a,), lambda g: (broadcast_to(g, a.data.shape),))


def broadcast_to(a, shape):
    a = as_var(a)
    shape = tuple(shape)
    if a.data.shape == shape:
        return a
    data = np.broadcast_to(a.data, shape).copy()
    return Var(data, (a,), lambda g: (_sum_to(g, a.data.shape),))


def add(a, b):
    a, b = as_var(a), as_var(b)
    data = a.data + b.data
    return Var(data, (a, b), lambda g: (_sum_to(g, a.data.shape), _sum_to(g, b.data.shape)))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    data = a.data - b.data
    return Var(data, (a, b), lambda g: (_sum_to(g, a.data.shape), _sum_to(neg(g), b.data.shape)))


def neg(a):
    a = as_var(a)
    return Var(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    data = a.data * b.data
    return Var(data, (a, b), lambda g: (_sum_to(mul(g, b), a.data.shape), _sum_to(mul(g, a), b.data.shape)))


def div(a, b):
    a, b = as_var(a), as_var(b)
    data = a.data / b.data
    def vjp(g):
        ga = _sum_to(div(g, b), a.data.shape)
        gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.data.shape)
        return ga, gb
    return Var(data, (a, b), vjp)


def exp(a):
    a = as_var(a)
    out = Var(np.exp(a.data), (a,), None)
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    a = as_var(a)
    return Var(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a):
    a = as_var(a)
    out = Var(np.sqrt(a.data), (a,), None)
    out.vjp = lambda g: (div(g, mul(Var(2.0), out)),)
    return out


def tanh(a):
    a = as_var(a)
    out = Var(np.tanh(a.data), (a,), None)
    out.vjp = lambda g: (mul(g, sub(Var(1.0), mul(out, out))),)
    return out


def sigmoid(a):
    a = as_var(a)
    # stable logistic: exp only on the negative side
    d = a.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Var(out_data, (a,), None)
    out.vjp = lambda g: (mul(g, mul(out, sub(Var(1.0), out))),)
    return out


def relu(a):
    # kink at 0 uses the almost-everywhere convention: derivative 0 there
    a = as_var(a)
    mask = Var((a.data > 0).astype(np.float64))
    return Var(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),))


def sum_all(a):
    a = as_var(a)
    return Var(a.data.sum(), (a,), lambda g: (broadcast_to(g, a.data.shape),))


def reshape(a, shape):
    a = as_var(a)
    shape = tuple(shape)
    return Var(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.data.shape),))


def transpose(a):
    a = as_var(a)
    return Var(a.data.T.copy(), (a,), lambda g: (transpose(g),))


def matmul(a, b):
    """numpy-style matmul for the (2D,2D), (2D,1D) and (1D,1D) cases."""
    a, b = as_var(a), as_var(b)
    na, nb = a.data.ndim, b.data.ndim
    data = a.data @ b.data
    if na == 2 and nb == 2:
        vjp = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    elif na == 2 and nb == 1:
        # outer(g, b) for the matrix side, A^T g for the vector side
        def vjp(g):
            m, n = a.data.shape
            ga = mul(reshape(g, (m, 1)), reshape(b, (1, n)))
            return ga, matmul(transpose(a), g)
    elif na == 1 and nb == 1:
        vjp = lambda g: (mul(g, b), mul(g, a))
    else:
        raise ValueError(f"unsupported matmul operand ranks {na} and {nb}")
    return Var(data, (a, b), vjp)


def dot(a, b):
    a, b = as_var(a), as_var(b)
    return matmul(reshape(a, (a.size,)), reshape(b, (b.size,)))


def concat1d(parts):
    parts = [as_var(p) for p in parts]
    sizes = [p.size for p in parts]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    data = np.concatenate([p.data.reshape(-1) for p in parts])
    def vjp(g):
        return tuple(reshape(slice1d(g, int(offs[i]), int(offs[i + 1])), parts[i].data.shape)
                     for i in range(len(parts)))
    return Var(data, tuple(parts), vjp)


def slice1d(a, start, stop):
    a = as_var(a)
    return Var(a.data[start:stop], (a,), lambda g: (embed1d(g, start, a.size),))


def embed1d(a, start, total):
    a = as_var(a)
    data = np.zeros(total)
    data[start:start + a.size] = a.data
    return Var(data, (a,), lambda g: (slice1d(g, start, start + a.size),))


# ---------------------------------------------------------------------------
# im2col / col2im, a dual pair of linear gather/scatter primitives


_GEOM_CACHE = {}


def conv_geometry(in_shape, kernel, stride, padding):
    """Flat gather indices turning a padded (C,H,W) image into patch columns."""
    key = (in_shape, kernel, stride, padding)
    geom = _GEOM_CACHE.get(key)
    if geom is None:
        c, h, w = in_shape
        hp, wp = h + 2 * padding, w + 2 * padding
        oh = (hp - kernel) // stride + 1
        ow = (wp - kernel) // stride + 1
        if oh <= 0 or ow <= 0:
            raise ValueError(f"kernel {kernel} does not fit input {in_shape} with stride {stride}, padding {padding}")
        # rows index (channel, ki, kj); columns index output positions
        ci, ki, kj = np.meshgrid(np.arange(c), np.arange(kernel), np.arange(kernel), indexing="ij")
        oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        ii = ki.reshape(-1, 1) + (oi * stride).reshape(1, -1)
        jj = kj.reshape(-1, 1) + (oj * stride).reshape(1, -1)
        flat = ci.reshape(-1, 1) * (hp * wp) + ii * wp + jj
        geom = (flat, (c, hp, wp), (oh, ow))
        _GEOM_CACHE[key] = geom
    return geom


def im2col(x, kernel, stride, padding):
    x = as_var(x)
    in_shape = x.data.shape
    idx, pad_shape, _ = conv_geometry(in_shape, kernel, stride, padding)
    c, hp, wp = pad_shape
    xpad = np.zeros(pad_shape)
    xpad[:, padding:padding + in_shape[1], padding:padding + in_shape[2]] = x.data
    data = xpad.reshape(-1)[idx]
    return Var(data, (x,), lambda g: (col2im(g, in_shape, kernel, stride, padding),))


def col2im(cols, in_shape, kernel, stride, padding):
    cols = as_var(cols)
    idx, pad_shape, _ = conv_geometry(tuple(in_shape), kernel, stride, padding)
    flat = np.zeros(pad_shape[0] * pad_shape[1] * pad_shape[2])
    np.add.at(flat, idx.reshape(-1), cols.data.reshape(-1))
    xpad = flat.reshape(pad_shape)
    data = xpad[:, padding:padding + in_shape[1], padding:padding + in_shape[2]].copy()
    return Var(data, (cols,), lambda g: (im2col(g, kernel, stride, padding),))


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root, needed):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) in needed and id(p) not in seen:
                stack.append((p, False))
    return order


def _reaches(root, targets):
    """ids of nodes on some path from `root` down to any node in `targets`."""
    target_ids = {id(t) for t in targets}
    memo = {}
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            # parents are finished by now (postorder)
            memo[id(node)] = id(node) in target_ids or any(memo[id(p)] for p in node.parents)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return {i for i, v in memo.items() if v}


def grad(output, inputs, grad_output=None):
    """Cotangents of a scalar `output` w.r.t. each Var in `inputs`.

    The returned Vars are graph nodes, so second derivatives come from
    calling `grad` again on expressions built from them.
    """
    output = as_var(output)
    if output.size != 1:
        raise ValueError("grad expects a scalar output")
    needed = _reaches(output, inputs)
    if id(output) not in needed:
        return [Var(np.zeros(v.data.shape)) for v in inputs]
    order = _toposort(output, needed)
    cotangent = {id(output): grad_output if grad_output is not None else Var(np.ones(output.data.shape))}
    for node in reversed(order):
        g = cotangent.get(id(node))
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or id(p) not in needed:
                continue
            acc = cotangent.get(id(p))
            cotangent[id(p)] = pg if acc is None else add(acc, pg)
    out = []
    for v in inputs:
        g = cotangent.get(id(v))
        out.append(g if g is not None else Var(np.zeros(v.data.shape)))
    return out
