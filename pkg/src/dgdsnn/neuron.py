"""Leaky integrate-and-fire dynamics and the Conv -> BN -> spiking-neuron
node primitive.

The membrane update is a soft reset: the previous spike subtracts one
threshold's worth of potential instead of zeroing the membrane.  Firing
uses >= at the threshold, so a membrane sitting exactly at v_th spikes.

The spike nonlinearity is a hard step in the forward pass; its backward
rule substitutes the arctan surrogate

    g(x) = alpha / (2 * (1 + (pi/2 * alpha * x)^2)),   alpha = 2

which is the derivative of the smooth sigmoid used by the ``smooth``
clone mode (arctan(pi/2 * alpha * x)/pi + 1/2).  Running a network with
``smooth=True`` makes the whole computation differentiable end to end,
which is how the BPTT machinery is validated against finite differences.
"""

from __future__ import annotations

import numpy as np

from .numgrad import (
    DimensionError,
    GradNode,
    add,
    as_node,
    matmul,
    reshape,
    swap_last2,
)

SURROGATE_ALPHA = 2.0


def surrogate_grad(x, alpha=SURROGATE_ALPHA):
    """Backward-pass stand-in for the step function's derivative.

    Even-symmetric, strictly positive, maximal at 0 where it equals
    alpha/2.
    """
    z = 0.5 * np.pi * alpha * np.asarray(x, dtype=np.float64)
    return alpha / (2.0 * (1.0 + z * z))


def smooth_spike_value(x, alpha=SURROGATE_ALPHA):
    """Smooth sigmoid whose derivative is exactly ``surrogate_grad``."""
    return np.arctan(0.5 * np.pi * alpha * np.asarray(x, dtype=np.float64)) / np.pi + 0.5


def spike(x, alpha=SURROGATE_ALPHA, smooth=False, threshold=0.0):
    """Heaviside step of (x - threshold) on the tape (ties fire).

    Forward emits exact 0/1 values (or the smooth sigmoid in clone
    mode); backward multiplies by the arctan surrogate in both modes.
    """
    x = as_node(x)
    shifted = x.value - threshold
    if smooth:
        out = smooth_spike_value(shifted, alpha)
    else:
        out = (shifted >= 0.0).astype(np.float64)

    def rule(g):
        return (g * surrogate_grad(shifted, alpha),)

    return GradNode(out, (x,), rule)


class LifState:
    """Per-neuron membrane and last-spike state for one LIF population.

    Dimensions bind lazily to the first input; ``reset`` drops them so a
    fresh sample starts from a zero membrane and zero spikes.
    """

    def __init__(self, tau_decay=0.5, v_th=1.0, surrogate_alpha=SURROGATE_ALPHA,
                 smooth=False):
        if not 0.0 <= tau_decay <= 1.0:
            raise ValueError(f"tau_decay must be in [0, 1], got {tau_decay}")
        if v_th <= 0.0:
            raise ValueError(f"v_th must be positive, got {v_th}")
        self.tau_decay = float(tau_decay)
        self.v_th = float(v_th)
        self.surrogate_alpha = float(surrogate_alpha)
        self.smooth = bool(smooth)
        self.membrane = None
        self.last_spike = None

    def reset(self):
        self.membrane = None
        self.last_spike = None


def _membrane_update(u_prev, current, s_prev, tau, v_th):
    """Fused soft-reset update: tau*u + C - v_th*s_prev (one tape op)."""
    out = tau * u_prev.value + current.value - v_th * s_prev.value

    def rule(g):
        return tau * g, g, -v_th * g

    return GradNode(out, (u_prev, current, s_prev), rule)


def lif_step(state, current):
    """One membrane update: u <- tau*u + C - v_th*s_prev, then fire.

    Updates ``state`` in place and returns the new spike map.
    """
    current = as_node(current)
    if state.membrane is None:
        state.membrane = GradNode(np.zeros_like(current.value))
        state.last_spike = GradNode(np.zeros_like(current.value))
    if state.membrane.value.shape != current.value.shape:
        raise DimensionError(
            f"input shape {current.value.shape} does not match membrane "
            f"shape {state.membrane.value.shape}")
    u = _membrane_update(state.membrane, current, state.last_spike,
                         state.tau_decay, state.v_th)
    s = spike(u, state.surrogate_alpha, state.smooth, threshold=state.v_th)
    state.membrane = u
    state.last_spike = s
    return s


# ---------------------------------------------------------------------------
# convolution / pooling ops (B, C, H, W layout)
# ---------------------------------------------------------------------------

_OFFSETS = tuple((dy, dx) for dy in range(3) for dx in range(3))


def im2col3x3(x):
    """Gather 3x3 same-padding patches: (B,C,H,W) -> (B, H*W, C*9)."""
    x = as_node(x)
    b, c, h, w = x.value.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    xp[:, :, 1:h + 1, 1:w + 1] = x.value
    cols = np.empty((b, c, 9, h, w), dtype=np.float64)
    for k, (dy, dx) in enumerate(_OFFSETS):
        cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + w]
    out = cols.transpose(0, 3, 4, 1, 2).reshape(b, h * w, c * 9)

    def rule(g):
        gc = g.reshape(b, h, w, c, 9).transpose(0, 3, 4, 1, 2)
        gp = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
        for k, (dy, dx) in enumerate(_OFFSETS):
            gp[:, :, dy:dy + h, dx:dx + w] += gc[:, :, k]
        return (gp[:, :, 1:h + 1, 1:w + 1].copy(),)

    return GradNode(out, (x,), rule)


def conv3x3(x, weight, bias):
    """3x3 convolution, padding 1, spatial size preserved.

    ``weight`` is (C_out, C_in, 3, 3); ``bias`` is (C_out,).
    """
    x = as_node(x)
    b, c_in, h, w = x.value.shape
    c_out = weight.value.shape[0]
    if weight.value.shape[1] != c_in:
        raise DimensionError(
            f"conv expects {weight.value.shape[1]} input channels, got {c_in}")
    cols = im2col3x3(x)
    wmat = swap_last2(reshape(weight, (c_out, c_in * 9)))
    out = matmul(cols, wmat)                      # (B, H*W, C_out)
    out = reshape(swap_last2(out), (b, c_out, h, w))
    return add(out, reshape(bias, (1, c_out, 1, 1)))


_BN_AXES = (0, 2, 3)


def batch_norm_train(x, gamma, beta, eps):
    """Fused per-channel batch normalization with batch statistics.

    Gradients flow through the batch mean and (biased) variance.
    Returns the output node plus the batch moments (C,) for the running
    estimates.
    """
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    mu = x.value.mean(axis=_BN_AXES, keepdims=True)
    xm = x.value - mu
    var = (xm * xm).mean(axis=_BN_AXES, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xm * inv
    c = x.value.shape[1]
    gv = gamma.value.reshape(1, c, 1, 1)
    out = gv * xhat + beta.value.reshape(1, c, 1, 1)

    def rule(g):
        dgamma = (g * xhat).sum(axis=_BN_AXES)
        dbeta = g.sum(axis=_BN_AXES)
        dxhat = g * gv
        m1 = dxhat.mean(axis=_BN_AXES, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=_BN_AXES, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    node = GradNode(out, (x, gamma, beta), rule)
    return node, mu.reshape(c), var.reshape(c)


def batch_norm_eval(x, gamma, beta, run_mean, run_var, eps):
    """Fused normalization with frozen running statistics."""
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    c = x.value.shape[1]
    inv = (1.0 / np.sqrt(run_var + eps)).reshape(1, c, 1, 1)
    xhat = (x.value - run_mean.reshape(1, c, 1, 1)) * inv
    gv = gamma.value.reshape(1, c, 1, 1)
    out = gv * xhat + beta.value.reshape(1, c, 1, 1)

    def rule(g):
        return (g * (gv * inv), (g * xhat).sum(axis=_BN_AXES),
                g.sum(axis=_BN_AXES))

    return GradNode(out, (x, gamma, beta), rule)


def avgpool2x2(x):
    """2x2 average pooling, stride 2; identity on 1x1 maps.

    Odd spatial dims other than 1x1 are a dimension error.
    """
    x = as_node(x)
    b, c, h, w = x.value.shape
    if h == 1 and w == 1:
        return x
    if h % 2 or w % 2:
        raise DimensionError(
            f"2x2 average pool needs even spatial dims, got {h}x{w}")
    out = x.value.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def rule(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return GradNode(out, (x,), rule)


# ---------------------------------------------------------------------------
# ConvBNSN node
# ---------------------------------------------------------------------------

class ConvBnSnNode:
    """A 3x3 convolution, per-channel batch normalization, and a LIF
    population, applied in that order.

    Train mode normalizes with the current batch's statistics (over the
    batch and spatial axes) and folds them into the running estimates
    with momentum 0.1; eval mode normalizes with the running estimates.
    """

    def __init__(self, in_channels, out_channels, rng, tau_decay=0.5, v_th=1.0,
                 surrogate_alpha=SURROGATE_ALPHA, bn_eps=1e-5, bn_momentum=0.1,
                 smooth=False):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        fan_in = in_channels * 9
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = GradNode(rng.uniform(-bound, bound,
                                           (out_channels, in_channels, 3, 3)))
        self.bias = GradNode(rng.uniform(-bound, bound, (out_channels,)))
        self.bn_gamma = GradNode(np.ones(out_channels))
        self.bn_beta = GradNode(np.zeros(out_channels))
        self.run_mean = np.zeros(out_channels)
        self.run_var = np.ones(out_channels)
        self.bn_eps = float(bn_eps)
        self.bn_momentum = float(bn_momentum)
        self.lif = LifState(tau_decay, v_th, surrogate_alpha, smooth)
        self.last_spikes = None

    def reset(self):
        self.lif.reset()
        self.last_spikes = None

    def parameters(self):
        return [self.weight, self.bias, self.bn_gamma, self.bn_beta]

    def _batch_norm(self, x, mode):
        if mode == "train":
            y, batch_mean, batch_var = batch_norm_train(
                x, self.bn_gamma, self.bn_beta, self.bn_eps)
            n = x.value.shape[0] * x.value.shape[2] * x.value.shape[3]
            unbiased = batch_var * (n / (n - 1)) if n > 1 else batch_var
            mom = self.bn_momentum
            self.run_mean = (1.0 - mom) * self.run_mean + mom * batch_mean
            self.run_var = (1.0 - mom) * self.run_var + mom * unbiased
            return y
        return batch_norm_eval(x, self.bn_gamma, self.bn_beta,
                               self.run_mean, self.run_var, self.bn_eps)


def conv_bn_sn_forward(node, x, mode="eval"):
    """Conv -> BN -> LIF step; output is a binary spike map."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = as_node(x)
    if x.value.ndim != 4:
        raise DimensionError(f"expected (B,C,H,W) input, got {x.value.shape}")
    if x.value.shape[1] != node.in_channels:
        raise DimensionError(
            f"node expects {node.in_channels} channels, got {x.value.shape[1]}")
    y = conv3x3(x, node.weight, node.bias)
    y = node._batch_norm(y, mode)
    s = lif_step(node.lif, y)
    node.last_spikes = s.value.copy()
    return s


def source_forward(node, x, mode="eval"):
    """ConvBNSN followed by 2x2 average pooling (halved spatial dims).

    Pooled values are spike averages in [0, 1].
    """
    s = conv_bn_sn_forward(node, x, mode)
    return avgpool2x2(s)
