"""Spatio-temporal structural plasticity: infer an instance-specific
adjacency matrix from node activity at every timestep.

The pipeline, in order: build the causal hybrid state (current source
output, previous-step outputs for everyone else), project each state to
a channel firing-rate embedding, fold it into an exponential synaptic
trace, score all ordered node pairs with multi-head additive attention,
symmetrize, row-softmax at low temperature, blend into the running
adjacency with momentum, and keep the top-k entries per row.

Entry S[i, j] is the synaptic weight from node j to node i.  All state
here is per-sample and batched along a leading axis; one forward pass
owns its state exclusively.
"""

from __future__ import annotations

import numpy as np

from .numgrad import (
    ContractError,
    DimensionError,
    GradNode,
    ParameterError,
    add,
    as_node,
    dropout,
    fan_in_uniform,
    leaky_relu,
    matmul,
    meannode,
    mul,
    relu,
    reshape,
    softmax_temperature,
    stack,
    sumnode,
    swap_last2,
)


class AttentionParams:
    """Learnable weights of the topology-inference attention.

    ``w_proj`` maps channel firing rates to the embedding (no bias, so a
    silent network keeps an exactly-zero embedding), ``w_head`` fans the
    trace out to the per-head subspaces, and ``attn`` holds one additive
    attention vector of length 2*d_head per head.
    """

    def __init__(self, w_proj, w_head, attn, n_heads, tau=0.01, dropout_p=0.2,
                 leaky_slope=0.01):
        if tau <= 0:
            raise ParameterError(f"softmax temperature must be > 0, got {tau}")
        if not 0.0 <= dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.w_proj = as_node(w_proj)
        self.w_head = as_node(w_head)
        self.attn = as_node(attn)
        self.n_heads = int(n_heads)
        self.tau = float(tau)
        self.dropout_p = float(dropout_p)
        self.leaky_slope = float(leaky_slope)
        d_proj = self.w_proj.value.shape[0]
        if d_proj % self.n_heads:
            raise ParameterError(
                f"projection dim {d_proj} not divisible by {self.n_heads} heads")
        self.d_proj = d_proj
        self.d_head = d_proj // self.n_heads
        if self.w_head.value.shape != (self.n_heads * self.d_head, d_proj):
            raise DimensionError(
                f"w_head must be ({self.n_heads * self.d_head}, {d_proj}), "
                f"got {self.w_head.value.shape}")
        if self.attn.value.shape != (self.n_heads, 2 * self.d_head):
            raise DimensionError(
                f"attn must be ({self.n_heads}, {2 * self.d_head}), "
                f"got {self.attn.value.shape}")

    @classmethod
    def init(cls, channels, rng, n_heads=4, tau=0.01, dropout_p=0.2,
             leaky_slope=0.01):
        """Fan-in uniform initialization with d_proj = channels."""
        d_proj = channels
        d_head = d_proj // n_heads
        if d_proj % n_heads:
            raise ParameterError(
                f"channels {channels} not divisible by {n_heads} heads")
        w_proj = fan_in_uniform(rng, (d_proj, channels), channels)
        w_head = fan_in_uniform(rng, (n_heads * d_head, d_proj), d_proj)
        attn = fan_in_uniform(rng, (n_heads, 2 * d_head), 2 * d_head)
        return cls(w_proj, w_head, attn, n_heads, tau, dropout_p, leaky_slope)

    def parameters(self):
        return [self.w_proj, self.w_head, self.attn]


class TraceBank:
    """Exponentially smoothed per-node activity traces.

    ``retention`` is the history weight: trace <- retention * trace +
    (1 - retention) * embedding.  Traces start at zero.
    """

    def __init__(self, n_nodes, dim, retention):
        if not 0.0 <= retention <= 1.0:
            raise ParameterError(f"retention must be in [0, 1], got {retention}")
        self.n_nodes = int(n_nodes)
        self.dim = int(dim)
        self.retention = float(retention)
        self.traces = None

    def reset(self, batch_size):
        self.traces = [GradNode(np.zeros((batch_size, self.dim)))
                       for _ in range(self.n_nodes)]


class AdjacencyState:
    """The evolving synaptic matrix and its pruned form.

    S starts as all-ones (uniform prior); ``beta`` is the momentum of
    the per-timestep update, with beta = 1 freezing the graph (the
    static variant).  Each row of the pruned matrix keeps at most ``k``
    entries, the row's largest.
    """

    def __init__(self, n_nodes, beta, k):
        if not 0.0 <= beta <= 1.0:
            raise ParameterError(f"beta must be in [0, 1], got {beta}")
        if not 1 <= k <= n_nodes:
            raise ParameterError(f"k must be in 1..{n_nodes}, got {k}")
        self.n_nodes = int(n_nodes)
        self.beta = float(beta)
        self.k = int(k)
        self.s = None
        self.s_pruned = None

    def reset(self, batch_size):
        self.s = GradNode(np.ones((batch_size, self.n_nodes, self.n_nodes)))
        self.s_pruned = None


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def hybrid_state(source_out, prev_outs, t, n_nodes=None):
    """Causal node states for timestep t: the source's current output,
    everyone else's previous-step output (zeros at t = 1)."""
    source_out = as_node(source_out)
    if prev_outs is None:
        if n_nodes is None:
            raise ParameterError("n_nodes required when prev_outs is absent")
        prev_outs = [GradNode(np.zeros_like(source_out.value))
                     for _ in range(n_nodes - 1)]
    return [source_out] + list(prev_outs)


def project_features(state, params):
    """Channel firing-rate embedding: ReLU(W_proj . spatial-mean(state))."""
    state = as_node(state)
    gap = meannode(state, axis=(2, 3))            # (B, C)
    return relu(matmul(gap, swap_last2(params.w_proj)))


def update_trace(bank, h, node):
    """Fold an embedding into node ``node``'s trace (in place; returns it)."""
    h = as_node(h)
    if bank.traces is None:
        bank.traces = [GradNode(np.zeros_like(h.value))
                       for _ in range(bank.n_nodes)]
    if h.value.shape != bank.traces[node].value.shape:
        raise DimensionError(
            f"embedding shape {h.value.shape} does not match trace shape "
            f"{bank.traces[node].value.shape}")
    lam = bank.retention
    if lam == 1.0:
        return bank.traces[node]
    if lam == 0.0:
        tr = h
    else:
        tr = add(mul(bank.traces[node], lam), mul(h, 1.0 - lam))
    bank.traces[node] = tr
    return tr


def attention_scores(traces, params):
    """Dense bidirectional pair scores, one (N, N) block per head.

    Per head m the trace is sliced to its subspace and scored as
    LeakyReLU(a_m . [h_i || h_j]) for every ordered pair, including
    i = j.  Returns (B, heads, N, N).
    """
    n = len(traces)
    tr = stack(traces, axis=1)                    # (B, N, d_proj)
    b = tr.value.shape[0]
    m, dh = params.n_heads, params.d_head
    ht = matmul(tr, swap_last2(params.w_head))    # (B, N, m*dh)
    ht = reshape(ht, (b, n, m, dh))
    left = _slice_last(params.attn, 0, dh)        # (m, dh)
    right = _slice_last(params.attn, dh, 2 * dh)
    src = sumnode(mul(ht, reshape(left, (1, 1, m, dh))), axis=-1)   # (B, N, m)
    dst = sumnode(mul(ht, reshape(right, (1, 1, m, dh))), axis=-1)
    pre = add(reshape(swap_last2(src), (b, m, n, 1)),
              reshape(swap_last2(dst), (b, m, 1, n)))
    return leaky_relu(pre, params.leaky_slope)


def symmetrize_scores(e):
    """Average each score with its transpose, then over heads.

    The result is exactly symmetric (bitwise), by commutativity of the
    pairwise average."""
    e = as_node(e)
    return meannode(mul(add(e, swap_last2(e)), 0.5), axis=1)


def instantaneous_adjacency(ebar, params, mode="eval", rng=None):
    """Row-wise temperature softmax of the symmetric scores; inverted
    dropout in train mode."""
    a = softmax_temperature(ebar, params.tau, axis=-1)
    if mode == "train" and params.dropout_p > 0.0:
        if rng is None:
            raise ParameterError("train-mode adjacency needs an rng for dropout")
        a = dropout(a, params.dropout_p, rng)
    return a


def momentum_update(state, a_hat):
    """S <- beta * S + (1 - beta) * A_hat, stored back on the state.

    beta = 1 leaves S untouched bitwise (static graph)."""
    if state.s is None:
        raise ContractError("adjacency state not reset before use")
    if state.beta == 1.0:
        return state.s
    a_hat = as_node(a_hat)
    if a_hat.value.shape != state.s.value.shape:
        raise DimensionError(
            f"adjacency update shape {a_hat.value.shape} does not match "
            f"state shape {state.s.value.shape}")
    s = add(mul(state.s, state.beta), mul(a_hat, 1.0 - state.beta))
    state.s = s
    return s


def topk_mask(values, k):
    """Binary mask of the k largest entries per row (last axis).

    Ties break toward the lowest column index."""
    order = np.argsort(-values, axis=-1, kind="stable")
    mask = np.zeros_like(values)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def topk_prune(s, k):
    """Keep the k largest entries per row, zero the rest.

    Gradients flow only through retained entries; pruned positions get
    an exactly-zero gradient (the mask is a constant on the tape)."""
    s = as_node(s)
    n = s.value.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in 1..{n}, got {k}")
    return mul(s, GradNode(topk_mask(s.value, k)))


def stsp_step(state, bank, params, source_out, prev_outs, t, mode="eval",
              rng=None):
    """One full plasticity step; returns the pruned adjacency.

    Composes hybrid state -> projection -> trace update -> attention ->
    symmetrization -> softmax(+dropout) -> momentum -> top-k, in that
    order, updating ``state`` and ``bank`` in place.
    """
    states = hybrid_state(source_out, prev_outs, t, n_nodes=state.n_nodes)
    if len(states) != state.n_nodes:
        raise DimensionError(
            f"expected {state.n_nodes} node states, got {len(states)}")
    for i, st in enumerate(states):
        update_trace(bank, project_features(st, params), i)
    e = attention_scores(bank.traces, params)
    ebar = symmetrize_scores(e)
    a_hat = instantaneous_adjacency(ebar, params, mode, rng)
    s = momentum_update(state, a_hat)
    pruned = topk_prune(s, state.k)
    state.s_pruned = pruned
    return pruned


def _slice_last(a, start, stop):
    a = as_node(a)

    def rule(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    return GradNode(a.value[..., start:stop].copy(), (a,), rule)
