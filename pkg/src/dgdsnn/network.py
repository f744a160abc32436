"""Layer and network assembly: ConvBNSN nodes wired through structural
plasticity and graph diffusion, stacked into a spiking classifier.

Each layer runs four phases per timestep: the source node (node 0)
consumes the layer input and pools its spikes; the plasticity step
infers the pruned adjacency from the hybrid node states; diffusion
carries the source signal to the other nodes; and the remaining nodes
fire, after which a learnable sigmoid-weighted readout of all node maps
is pooled into the layer output.  Layer l's output feeds layer l+1's
source directly.  The classifier averages spatial features and emits
per-timestep logits; the network's decision is the mean of those logits
over the T timesteps.

All per-sample dynamic state (membranes, adjacency, traces, previous
outputs) is reset before the first frame of every forward pass, so
samples are independent.  Parameters are shared and read-only during
evaluation; training owns them exclusively.
"""

from __future__ import annotations

import numpy as np

from . import energy as energy_ops
from .diffusion import (
    build_operator,
    diffuse,
    dirichlet_energy,
    init_signal,
)
from .neuron import ConvBnSnNode, conv_bn_sn_forward, source_forward, avgpool2x2
from .numgrad import (
    DimensionError,
    GradNode,
    add,
    as_node,
    matmul,
    meannode,
    mul,
    reshape,
    sigmoid,
    stack,
    sumnode,
    swap_last2,
)
from .stsp import AdjacencyState, AttentionParams, TraceBank, stsp_step


class LayerTrace:
    """Per-timestep records of one layer's dynamics for one forward
    pass: dense and pruned adjacencies, node spike maps, Dirichlet
    energy of the diffused signal, per-node firing rates, and the
    event-driven accumulate tallies."""

    def __init__(self):
        self.adjacency = []          # [t] -> (B, N, N) dense S
        self.adjacency_pruned = []   # [t] -> (B, N, N)
        self.spikes = []             # [t] -> [node] -> (B, C, H, W)
        self.energy = []             # [t] -> (B,)
        self.firing = []             # [t] -> (B, N)
        self.event_acs = []          # [t] -> {"conv": int, "gd": int}

    @property
    def timesteps(self):
        return len(self.adjacency)


class NetTrace:
    """Whole-network forward record: encoder spikes plus one LayerTrace
    per layer, and the encoder's event tallies."""

    def __init__(self, n_layers):
        self.encoder_spikes = []       # [t] -> (B, C, H, W)
        self.encoder_event_acs = []    # [t] -> int
        self.layers = [LayerTrace() for _ in range(n_layers)]


class DgdLayer:
    """One dynamic-graph layer: N ConvBNSN nodes (node 0 is the source),
    adjacency/trace state, attention parameters, and readout weights."""

    def __init__(self, n_nodes, channels, rng, diffusion_steps=2, top_k=3,
                 trace_retention=0.6, graph_beta=0.2, n_heads=4,
                 softmax_tau=0.01, dropout_p=0.2, tau_decay=0.5, v_th=1.0,
                 smooth=False):
        if n_nodes < 2:
            raise ValueError(f"a layer needs at least 2 nodes, got {n_nodes}")
        self.n_nodes = int(n_nodes)
        self.channels = int(channels)
        self.diffusion_steps = int(diffusion_steps)
        self.nodes = [
            ConvBnSnNode(channels, channels, rng, tau_decay=tau_decay,
                         v_th=v_th, smooth=smooth)
            for _ in range(n_nodes)
        ]
        self.adjacency = AdjacencyState(n_nodes, graph_beta, top_k)
        self.traces = TraceBank(n_nodes, channels, trace_retention)
        self.attention = AttentionParams.init(
            channels, rng, n_heads=n_heads, tau=softmax_tau,
            dropout_p=dropout_p)
        self.readout_w = GradNode(np.zeros(n_nodes))
        self.prev_outs = None

    def reset(self, batch_size):
        for node in self.nodes:
            node.reset()
        self.adjacency.reset(batch_size)
        self.traces.reset(batch_size)
        self.prev_outs = None

    def parameters(self):
        params = []
        for node in self.nodes:
            params.extend(node.parameters())
        params.extend(self.attention.parameters())
        params.append(self.readout_w)
        return params


def layer_forward(layer, x, t, mode="eval", rng=None, trace=None):
    """One timestep of one layer; returns (output map, trace record).

    Phases: source node -> plasticity -> diffusion -> node firing and
    weighted pooled readout.
    """
    x = as_node(x)
    if x.value.shape[1] != layer.channels:
        raise DimensionError(
            f"source phase expects {layer.channels} channels, "
            f"got {x.value.shape[1]}")
    n = layer.n_nodes

    # Phase 1: source node output (pooled spike averages).
    o0 = source_forward(layer.nodes[0], x, mode)

    # Phase 2: instance-specific pruned adjacency.
    pruned = stsp_step(layer.adjacency, layer.traces, layer.attention,
                       o0, layer.prev_outs, t, mode, rng)

    # Phase 3: diffusion of the source signal to the other nodes.
    op = build_operator(pruned, layer.diffusion_steps)
    signal = init_signal(o0, n)
    inputs, diffused = diffuse(op, signal)

    # Phase 4: remaining nodes fire; weighted readout, pooled.
    outs = [o0]
    for i in range(1, n):
        outs.append(conv_bn_sn_forward(layer.nodes[i], inputs[i - 1], mode))
    stacked = stack(outs, axis=0)                       # (N, B, C, H, W)
    gates = reshape(sigmoid(layer.readout_w), (n, 1, 1, 1, 1))
    out = avgpool2x2(sumnode(mul(stacked, gates), axis=0))

    layer.prev_outs = outs[1:]

    record = None
    if trace is not None:
        spikes = [node.last_spikes.copy() for node in layer.nodes]
        conv_acs = energy_ops.conv_event_acs(x.value, layer.channels)
        for inp in inputs:
            conv_acs += energy_ops.conv_event_acs(inp.value, layer.channels)
        gd_acs = energy_ops.diffusion_event_acs(
            op.p.value, signal.x.value, layer.diffusion_steps)
        record = {
            "adjacency": layer.adjacency.s.value.copy(),
            "pruned": pruned.value.copy(),
            "spikes": spikes,
            "energy": dirichlet_energy(diffused, op.s_sym),
            "firing": np.stack([s.mean(axis=(1, 2, 3)) for s in spikes], axis=1),
            "event_acs": {"conv": conv_acs, "gd": gd_acs},
        }
        trace.adjacency.append(record["adjacency"])
        trace.adjacency_pruned.append(record["pruned"])
        trace.spikes.append(record["spikes"])
        trace.energy.append(np.atleast_1d(record["energy"]))
        trace.firing.append(record["firing"])
        trace.event_acs.append(record["event_acs"])
    return out, record


class MorphNet:
    """Direct-encoding ConvBNSN stage, L dynamic-graph layers, and a
    linear classifier over spatially averaged features."""

    def __init__(self, in_channels, channels, n_classes, timesteps, rng,
                 n_layers=3, n_nodes=4, diffusion_steps=2, top_k=3,
                 trace_retention=0.6, graph_beta=0.2, n_heads=4,
                 softmax_tau=0.01, dropout_p=0.2, tau_decay=0.5, v_th=1.0,
                 smooth=False):
        self.in_channels = int(in_channels)
        self.channels = int(channels)
        self.n_classes = int(n_classes)
        self.timesteps = int(timesteps)
        self.encoder = ConvBnSnNode(in_channels, channels, rng,
                                    tau_decay=tau_decay, v_th=v_th,
                                    smooth=smooth)
        self.layers = [
            DgdLayer(n_nodes, channels, rng, diffusion_steps=diffusion_steps,
                     top_k=top_k, trace_retention=trace_retention,
                     graph_beta=graph_beta, n_heads=n_heads,
                     softmax_tau=softmax_tau, dropout_p=dropout_p,
                     tau_decay=tau_decay, v_th=v_th, smooth=smooth)
            for _ in range(n_layers)
        ]
        bound = 1.0 / np.sqrt(channels)
        self.classifier_w = GradNode(rng.uniform(-bound, bound,
                                                 (n_classes, channels)))
        self.classifier_b = GradNode(rng.uniform(-bound, bound, (n_classes,)))

    def parameters(self):
        params = self.encoder.parameters()
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.classifier_w, self.classifier_b])
        return params

    def named_parameters(self):
        named = {}

        def put(prefix, node):
            named[f"{prefix}.weight"] = node.weight
            named[f"{prefix}.bias"] = node.bias
            named[f"{prefix}.bn_gamma"] = node.bn_gamma
            named[f"{prefix}.bn_beta"] = node.bn_beta

        put("encoder", self.encoder)
        for li, layer in enumerate(self.layers):
            for ni, node in enumerate(layer.nodes):
                put(f"layer{li}.node{ni}", node)
            named[f"layer{li}.attn.w_proj"] = layer.attention.w_proj
            named[f"layer{li}.attn.w_head"] = layer.attention.w_head
            named[f"layer{li}.attn.attn"] = layer.attention.attn
            named[f"layer{li}.readout_w"] = layer.readout_w
        named["classifier.weight"] = self.classifier_w
        named["classifier.bias"] = self.classifier_b
        return named

    def named_buffers(self):
        named = {"encoder.run_mean": self.encoder.run_mean,
                 "encoder.run_var": self.encoder.run_var}
        for li, layer in enumerate(self.layers):
            for ni, node in enumerate(layer.nodes):
                named[f"layer{li}.node{ni}.run_mean"] = node.run_mean
                named[f"layer{li}.node{ni}.run_var"] = node.run_var
        return named


def reset_state(net, batch_size=1):
    """Zero all membranes and spikes, restore the all-ones adjacency,
    clear the traces and previous outputs."""
    net.encoder.reset()
    for layer in net.layers:
        layer.reset(batch_size)


def network_forward(net, stream, mode="eval", rng=None, record_trace=True):
    """Run a spike stream through the network.

    ``stream`` is (T, C, H, W) for one sample or (B, T, C, H, W) for a
    batch, with exactly the network's T frames.  Returns the mean-over-T
    logits (B, n_classes) and the forward trace.
    """
    frames = np.asarray(stream, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[None]
    if frames.ndim != 5:
        raise DimensionError(
            f"stream must be (T,C,H,W) or (B,T,C,H,W), got {frames.shape}")
    b, t_frames = frames.shape[0], frames.shape[1]
    if t_frames != net.timesteps:
        raise DimensionError(
            f"network expects {net.timesteps} frames, got {t_frames}")
    if frames.shape[2] != net.in_channels:
        raise DimensionError(
            f"network expects {net.in_channels} input channels, "
            f"got {frames.shape[2]}")

    reset_state(net, b)
    trace = NetTrace(len(net.layers)) if record_trace else None
    logits_sum = None
    for t in range(1, net.timesteps + 1):
        x = GradNode(frames[:, t - 1])
        h = conv_bn_sn_forward(net.encoder, x, mode)
        if trace is not None:
            trace.encoder_spikes.append(net.encoder.last_spikes.copy())
            trace.encoder_event_acs.append(
                energy_ops.conv_event_acs(x.value, net.channels))
        for li, layer in enumerate(net.layers):
            h, _ = layer_forward(layer, h, t, mode, rng,
                                 trace.layers[li] if trace else None)
        feats = meannode(h, axis=(2, 3))                       # (B, C)
        logits_t = add(matmul(feats, swap_last2(net.classifier_w)),
                       net.classifier_b)
        logits_sum = logits_t if logits_sum is None else add(logits_sum,
                                                             logits_t)
    logits = mul(logits_sum, 1.0 / net.timesteps)
    return logits, trace
