"""Dense float64 numerics with a reverse-mode gradient tape.

Matrices (and the 4-D spike maps used upstream) are plain ``numpy``
float64 arrays.  Every differentiable operation wraps its result in a
:class:`GradNode` that remembers its parents and the adjoint rule of the
op that produced it; :func:`backward` walks the recorded graph in
reverse topological order and accumulates gradients additively.

The op set is deliberately small and fixed: elementwise arithmetic with
broadcasting, matrix products (batched), reductions, a handful of
activations, temperature softmax, dropout, and the row embed/extract
helpers the graph-signal code needs.  There is no numeric
differentiation anywhere in these rules; finite differences live in the
test harness only.

A tape is single-owner: one training step runs on one tape.  Values may
be shared read-only across threads.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """A hyperparameter or argument is outside its documented range."""


class ContractError(RuntimeError):
    """An internal invariant or precondition was violated."""


class DataError(ValueError):
    """Input data does not satisfy the operation's requirements."""


# ---------------------------------------------------------------------------
# gradient tape
# ---------------------------------------------------------------------------

class GradNode:
    """One value on the tape: a float64 array, its gradient, and the
    adjoint rule of the op that produced it.

    Leaf nodes (parameters, constants) have no parents and no rule.
    ``grad`` reads as zeros until a backward pass reaches the node, and
    accumulates additively across repeated backward calls.
    """

    __slots__ = ("value", "_grad", "_parents", "_rule")

    def __init__(self, value, parents=(), rule=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self._parents = tuple(parents)
        self._rule = rule

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def detach(self):
        """A leaf holding the same value; no gradient flows through it."""
        return GradNode(self.value)

    # convenience operators ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"GradNode(shape={self.value.shape}, leaf={self._rule is None})"


def as_node(x):
    """Coerce an array/scalar to a constant leaf; pass GradNodes through."""
    if isinstance(x, GradNode):
        return x
    return GradNode(np.asarray(x, dtype=np.float64))


def _toposort(root):
    """Nodes reachable from ``root``, root first, leaves last."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into every ancestor of ``loss``.

    ``loss`` must be scalar (size-1).  Each call adds one full pass of
    gradients on top of whatever is already stored.
    """
    if not isinstance(loss, GradNode):
        raise ContractError("backward root must be a GradNode")
    if loss.value.size != 1:
        raise ContractError(
            f"backward root must be scalar, got shape {loss.value.shape}")
    order = _toposort(loss)
    passgrad = {id(loss): np.ones_like(loss.value)}
    for node in order:
        g = passgrad.pop(id(node), None)
        if g is None:
            continue
        node._grad = g if node._grad is None else node._grad + g
        if node._rule is None:
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None:
                continue
            prev = passgrad.get(id(parent))
            passgrad[id(parent)] = pg if prev is None else prev + pg


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value + b.value

    def rule(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return GradNode(out, (a, b), rule)


def sub(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value - b.value

    def rule(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return GradNode(out, (a, b), rule)


def mul(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value * b.value

    def rule(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return GradNode(out, (a, b), rule)


def relu(a):
    a = as_node(a)
    mask = a.value > 0.0

    def rule(g):
        return (g * mask,)

    return GradNode(np.where(mask, a.value, 0.0), (a,), rule)


def leaky_relu(a, slope=0.01):
    a = as_node(a)
    pos = a.value >= 0.0
    factor = np.where(pos, 1.0, slope)

    def rule(g):
        return (g * factor,)

    return GradNode(np.where(pos, a.value, slope * a.value), (a,), rule)


def sigmoid(a):
    a = as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.value))

    def rule(g):
        return (g * out * (1.0 - out),)

    return GradNode(out, (a,), rule)


def clip_min(a, floor):
    """max(x, floor) elementwise; gradient passes where x >= floor."""
    a = as_node(a)
    mask = a.value >= floor

    def rule(g):
        return (g * mask,)

    return GradNode(np.maximum(a.value, floor), (a,), rule)


def rsqrt(a):
    """1/sqrt(x), elementwise; inputs must be positive."""
    a = as_node(a)
    out = 1.0 / np.sqrt(a.value)

    def rule(g):
        return (g * (-0.5) * out / a.value,)

    return GradNode(out, (a,), rule)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_node(a)
    src = a.value.shape

    def rule(g):
        return (g.reshape(src),)

    return GradNode(a.value.reshape(shape), (a,), rule)


def transpose(a, axes=None):
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = np.argsort(axes)

    def rule(g):
        return (g.transpose(inv),)

    return GradNode(a.value.transpose(axes), (a,), rule)


def swap_last2(a):
    """Transpose the trailing two axes (matrix transpose, batched)."""
    a = as_node(a)

    def rule(g):
        return (np.swapaxes(g, -1, -2),)

    return GradNode(np.swapaxes(a.value, -1, -2), (a,), rule)


def stack(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)

    def rule(g):
        slices = np.split(g, len(nodes), axis=axis)
        return tuple(np.squeeze(s, axis=axis) for s in slices)

    return GradNode(out, tuple(nodes), rule)


def embed_row0(a, n):
    """Place ``a`` (B, F) as row 0 of an all-zero (B, n, F) block."""
    a = as_node(a)
    b, f = a.value.shape
    out = np.zeros((b, n, f), dtype=np.float64)
    out[:, 0, :] = a.value

    def rule(g):
        return (g[:, 0, :],)

    return GradNode(out, (a,), rule)


def take_row(a, i):
    """Row ``i`` of a stacked signal: (B, N, F) -> (B, F)."""
    a = as_node(a)

    def rule(g):
        full = np.zeros_like(a.value)
        full[:, i, :] = g
        return (full,)

    return GradNode(a.value[:, i, :].copy(), (a,), rule)


def gather_rows(a, idx):
    """out[b] = a[b, idx[b]] for a (B, K) matrix of per-row picks."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.value.shape[0])

    def rule(g):
        full = np.zeros_like(a.value)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return GradNode(a.value[rows, idx].copy(), (a,), rule)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim):
    ax = axis if isinstance(axis, tuple) else (axis,)
    return tuple(sorted(a % ndim for a in ax))


def _restore_dims(g, axes, keepdims):
    if keepdims:
        return g
    for i in axes:
        g = np.expand_dims(g, i)
    return g


def sumnode(a, axis=None, keepdims=False):
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)
    axes = None if axis is None else _normalize_axes(axis, a.value.ndim)

    def rule(g):
        if axes is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = _restore_dims(g, axes, keepdims)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return GradNode(out, (a,), rule)


def meannode(a, axis=None, keepdims=False):
    a = as_node(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    axes = None if axis is None else _normalize_axes(axis, a.value.ndim)
    count = a.value.size if axes is None else int(
        np.prod([a.value.shape[i] for i in axes]))

    def rule(g):
        if axes is None:
            return (np.broadcast_to(g / count, a.value.shape).copy(),)
        gg = _restore_dims(g, axes, keepdims)
        return (np.broadcast_to(gg / count, a.value.shape).copy(),)

    return GradNode(out, (a,), rule)


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product, batched over leading axes with broadcasting.

    Differentiable in both operands.  The trailing two axes must be
    compatible in the usual (n, m) x (m, p) sense.
    """
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(
            f"matmul needs matrices, got shapes {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {av.shape} x {bv.shape}")
    out = np.matmul(av, bv)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return GradNode(out, (a, b), rule)


# ---------------------------------------------------------------------------
# softmax / logsumexp
# ---------------------------------------------------------------------------

def softmax_temperature(a, tau, axis=-1):
    """Temperature softmax along ``axis``, max-subtracted for stability.

    Rows sum to 1 within 1e-12; shift-invariant in the inputs.
    """
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    a = as_node(a)
    z = a.value / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / tau,)

    return GradNode(out, (a,), rule)


def logsumexp(a, axis=-1):
    a = as_node(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def rule(g):
        return (np.expand_dims(g, axis) * soft,)

    return GradNode(out, (a,), rule)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(a, p, rng):
    """Inverted dropout: zero with probability ``p``, scale survivors by
    1/(1-p).  ``p == 0`` is the identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"drop probability must be in [0, 1), got {p}")
    a = as_node(a)
    if p == 0.0:
        return a
    keep = (rng.uniform(size=a.value.shape) >= p) / (1.0 - p)

    def rule(g):
        return (g * keep,)

    return GradNode(a.value * keep, (a,), rule)


# ---------------------------------------------------------------------------
# symmetric eigen-analysis
# ---------------------------------------------------------------------------

def spectral_range(sym, tol=1e-12, max_sweeps=100):
    """Extremal eigenvalues (min, max) of a symmetric matrix.

    Uses cyclic Jacobi rotations, which converge quadratically and are
    accurate to near machine precision for the N <= 64 matrices this
    engine works with.  Asymmetry beyond 1e-10 is a contract violation.
    """
    m = np.asarray(sym, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected square matrix, got shape {m.shape}")
    if m.shape[0] == 0:
        raise DimensionError("empty matrix has no spectrum")
    asym = np.abs(m - m.T).max()
    if asym > 1e-10:
        raise ContractError(
            f"spectral_range needs a symmetric matrix (max asymmetry {asym:g})")
    a = (m + m.T) / 2.0
    n = a.shape[0]
    if n == 1:
        return float(a[0, 0]), float(a[0, 0])
    scale = max(np.abs(a).max(), 1.0)
    for _ in range(max_sweeps):
        off = np.sqrt(max((a**2).sum() - (np.diag(a)**2).sum(), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta)
                                          + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
    eigs = np.sort(np.diag(a))
    return float(eigs[0]), float(eigs[-1])


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

class Rng:
    """Counter-based random stream (Philox 4x64-10) keyed by
    (seed, stream).

    The generator is numpy's Philox with the 128-bit key
    ``[seed, stream]`` and the counter starting at zero, so any other
    implementation of Philox 4x64-10 can reproduce the draw sequence
    bit-for-bit.  Identical seeds give identical sequences on every
    platform.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.zeros(2, dtype=np.uint64)
        key[0] = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        key[1] = np.uint64(self.stream & 0xFFFFFFFFFFFFFFFF)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream):
        """Independent stream derived from the same seed."""
        return Rng(self.seed, stream)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def bernoulli(self, p, size=None):
        return (self._gen.uniform(0.0, 1.0, size) < p).astype(np.uint8)

    def poisson(self, lam, size=None):
        return self._gen.poisson(lam, size)

    def permutation(self, n):
        return self._gen.permutation(n)


def fan_in_uniform(rng, shape, fan_in):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
