"""Symmetric degree-normalized graph diffusion and its energy
instrumentation.

The operator is P = D^{-1/2} S_sym D^{-1/2} built on the symmetrized
pruned adjacency S_sym = (S_hat + S_hat^T)/2, with D the degree matrix
of S_sym.  No self-loops are added beyond what the adjacency already
carries: the LIF membrane decay supplies the temporal self-memory, so
the renormalization trick is deliberately avoided.  Degrees are floored
at 1e-12 (max, not added) to guard rows that dropout may have emptied;
connected graphs are untouched bit for bit.

Diffusion multiplies by P sequentially M times (never by forming P^M),
keeping the gradient tape exact; it is differentiable in both P and the
signal.  The Dirichlet energy tr(Y^T L Y) with L = Id - P is a
diagnostic computed on detached values, together with its pairwise-sum
form, which serves as the independent oracle:

    E = 1/2 sum_ij S_sym[i,j] || y_i/sqrt(d_i) - y_j/sqrt(d_j) ||^2

One diffusion step is an exact gradient-descent step on E with step
size 0.5, the largest stable one: eigenvalues of L lie in [0, 2], so
the per-step mode amplification (1 - lambda)^2 never exceeds 1, with
equality exactly on bipartite (lambda = 2) modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numgrad import (
    ContractError,
    GradNode,
    ParameterError,
    add,
    as_node,
    clip_min,
    embed_row0,
    matmul,
    mul,
    reshape,
    rsqrt,
    sumnode,
    swap_last2,
    take_row,
)
from .stsp import topk_mask

DEGREE_FLOOR = 1e-12


@dataclass
class DiffusionOperator:
    """The normalized operator P, its symmetrized adjacency and degree
    vector (all on the tape), and the step count M."""
    p: GradNode
    s_sym: GradNode
    degree: GradNode
    steps: int


@dataclass
class GraphSignal:
    """Stacked node features (B, N, C*H*W); row 0 carries the source."""
    x: GradNode
    node_shape: tuple


def build_operator(s_hat, steps):
    """Symmetrize, degree-normalize, and wrap the pruned adjacency.

    Accepts (N, N) or batched (B, N, N); entries must be nonnegative.
    """
    s_hat = as_node(s_hat)
    if (s_hat.value < 0).any():
        raise ContractError("adjacency entries must be nonnegative")
    if s_hat.value.shape[-1] != s_hat.value.shape[-2]:
        raise ContractError(
            f"adjacency must be square, got {s_hat.value.shape}")
    n = s_hat.value.shape[-1]
    lead = s_hat.value.shape[:-2]
    s_sym = mul(add(s_hat, swap_last2(s_hat)), 0.5)
    degree = clip_min(sumnode(s_sym, axis=-1), DEGREE_FLOOR)
    dinv = rsqrt(degree)
    p = mul(mul(s_sym, reshape(dinv, lead + (n, 1))),
            reshape(dinv, lead + (1, n)))
    return DiffusionOperator(p, s_sym, degree, int(steps))


def init_signal(source_out, n_nodes):
    """Row 0 = flattened source output, rows 1..N-1 = 0."""
    source_out = as_node(source_out)
    b = source_out.value.shape[0]
    node_shape = source_out.value.shape[1:]
    feat = int(np.prod(node_shape))
    flat = reshape(source_out, (b, feat))
    return GraphSignal(embed_row0(flat, n_nodes), tuple(node_shape))


def diffuse(op, signal):
    """M sequential multiplications by P; returns the per-node inputs
    (rows 1..N-1, reshaped to the node map shape) and the diffused
    signal.  M = 0 returns the signal unchanged."""
    y = signal.x
    for _ in range(op.steps):
        y = matmul(op.p, y)
    diffused = GraphSignal(y, signal.node_shape)
    b = y.value.shape[0]
    n = y.value.shape[1]
    inputs = [reshape(take_row(y, i), (b,) + signal.node_shape)
              for i in range(1, n)]
    return inputs, diffused


# ---------------------------------------------------------------------------
# Dirichlet energy diagnostics (detached; no gradient contribution)
# ---------------------------------------------------------------------------

def _detach(x):
    if isinstance(x, GraphSignal):
        x = x.x
    if isinstance(x, GradNode):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _normalized_operator(s_sym):
    d = np.maximum(s_sym.sum(axis=-1), DEGREE_FLOOR)
    dinv = 1.0 / np.sqrt(d)
    return s_sym * dinv[..., :, None] * dinv[..., None, :]


def dirichlet_energy(y, s_sym):
    """tr(Y^T L Y) with L = Id - D^{-1/2} S_sym D^{-1/2}.

    ``s_sym`` must be symmetric and nonnegative.  Batched inputs return
    one energy per leading index; plain (N, F) inputs return a float.
    """
    y = _detach(y)
    s = _detach(s_sym)
    p = _normalized_operator(s)
    ly = y - p @ y
    e = (y * ly).sum(axis=(-1, -2))
    return float(e) if e.ndim == 0 else e


def dirichlet_energy_pairwise(y, s_sym):
    """The weighted pairwise-difference form of the same energy; kept
    independent of the trace form as its oracle."""
    y = _detach(y)
    s = _detach(s_sym)
    d = np.maximum(s.sum(axis=-1), DEGREE_FLOOR)
    yn = y / np.sqrt(d)[..., :, None]
    sq = (yn * yn).sum(axis=-1)
    cross = yn @ np.swapaxes(yn, -1, -2)
    pair = sq[..., :, None] + sq[..., None, :] - 2.0 * cross
    e = 0.5 * (s * pair).sum(axis=(-1, -2))
    return float(e) if e.ndim == 0 else e


def verify_gradient_flow(op, y):
    """Frobenius residual between P.Y and the explicit gradient-descent
    map (Id - 2*0.5*L).Y; an algebraic identity asserted numerically."""
    p = _detach(op.p)
    y = _detach(y)
    n = p.shape[-1]
    eye = np.eye(n)
    l_norm = eye - p
    euler = eye - 2.0 * 0.5 * l_norm
    resid = p @ y - euler @ y
    return float(np.sqrt((resid * resid).sum()))


def energy_decay_profile(op, y0, steps):
    """Energies of P^k y0 for k = 0..steps (steps+1 values).

    Non-increasing within 1e-9, with plateaus on bipartite boundary
    modes."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    p = _detach(op.p)
    s = _detach(op.s_sym)
    y = _detach(y0)
    out = [dirichlet_energy(y, s)]
    for _ in range(steps):
        y = p @ y
        out.append(dirichlet_energy(y, s))
    return out


# ---------------------------------------------------------------------------
# graph constructors (analysis and tests)
# ---------------------------------------------------------------------------

def graph_adjacency(kind, n, rng=None, k=None):
    """Named adjacency for the analysis command: a path, a complete
    graph (no self-loops), or a random row-top-k pruned matrix."""
    if n < 1:
        raise ParameterError(f"need at least one node, got {n}")
    if kind == "path":
        a = np.zeros((n, n))
        for i in range(n - 1):
            a[i, i + 1] = a[i + 1, i] = 1.0
        return a
    if kind == "complete":
        return np.ones((n, n)) - np.eye(n)
    if kind == "random":
        if rng is None:
            raise ParameterError("random graph needs an rng")
        k = k or min(3, n)
        raw = rng.uniform(0.05, 1.0, (n, n))
        return raw * topk_mask(raw, k)
    raise ParameterError(f"unknown graph kind {kind!r} "
                         "(choose from path, complete, random)")
