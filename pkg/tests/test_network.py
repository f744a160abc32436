import numpy as np
import pytest

from dgdsnn.network import (
    DgdLayer,
    MorphNet,
    layer_forward,
    network_forward,
    reset_state,
)
from dgdsnn.neuron import avgpool2x2, conv_bn_sn_forward, source_forward
from dgdsnn.numgrad import (
    DimensionError,
    GradNode,
    Rng,
    backward,
    mul,
    sumnode,
)
from dgdsnn.stsp import stsp_step, topk_mask
from dgdsnn.diffusion import build_operator, diffuse, init_signal
from helpers import numeric_grad, rel_err


def small_layer(seed=50, n_nodes=3, channels=4, beta=0.2, smooth=False):
    return DgdLayer(n_nodes, channels, Rng(seed, 7), diffusion_steps=2,
                    top_k=2, graph_beta=beta, n_heads=2, smooth=smooth)


def small_net(seed=60, timesteps=2, n_layers=1, n_nodes=3, channels=4,
              beta=0.2, smooth=False, input_hw=8):
    net = MorphNet(in_channels=2, channels=channels, n_classes=3,
                   timesteps=timesteps, rng=Rng(seed, 7), n_layers=n_layers,
                   n_nodes=n_nodes, diffusion_steps=2, top_k=2,
                   graph_beta=beta, n_heads=2, smooth=smooth)
    net._test_input_hw = input_hw
    return net


def spikes_input(seed, b, t, hw=8):
    return (Rng(seed).uniform(size=(b, t, 2, hw, hw)) > 0.8).astype(float)


# ---------------------------------------------------------------------------
# layer forward
# ---------------------------------------------------------------------------

def test_layer_phase_order_oracle():
    # manual composition of the four phases, bitwise equal over 2 steps
    auto = small_layer()
    manual = small_layer()
    auto.reset(1)
    manual.reset(1)
    x1 = GradNode((Rng(1).uniform(size=(1, 4, 8, 8)) > 0.6).astype(float))
    x2 = GradNode((Rng(2).uniform(size=(1, 4, 8, 8)) > 0.6).astype(float))

    outs_auto = []
    for t, x in ((1, x1), (2, x2)):
        out, _ = layer_forward(auto, x, t, "eval")
        outs_auto.append(out.value.copy())

    prev = None
    for t, x in ((1, x1), (2, x2)):
        o0 = source_forward(manual.nodes[0], x, "eval")
        pruned = stsp_step(manual.adjacency, manual.traces, manual.attention,
                           o0, prev, t, "eval")
        op = build_operator(pruned, manual.diffusion_steps)
        inputs, _ = diffuse(op, init_signal(o0, manual.n_nodes))
        outs = [o0]
        for i in range(1, manual.n_nodes):
            outs.append(conv_bn_sn_forward(manual.nodes[i], inputs[i - 1],
                                           "eval"))
        sig = 1.0 / (1.0 + np.exp(-manual.readout_w.value))
        weighted = sum(sig[i] * outs[i].value for i in range(manual.n_nodes))
        pooled = avgpool2x2(GradNode(weighted)).value
        np.testing.assert_array_equal(outs_auto[t - 1], pooled)
        prev = outs[1:]


def test_layer_readout_with_zero_weights_is_half_sum():
    layer = small_layer()
    layer.reset(1)
    x = GradNode((Rng(3).uniform(size=(1, 4, 8, 8)) > 0.5).astype(float))
    out, _ = layer_forward(layer, x, 1, "eval")
    # rebuild the readout from the recorded node outputs: sigmoid(0)=0.5
    twin = small_layer()
    twin.reset(1)
    o0 = source_forward(twin.nodes[0], x, "eval")
    pruned = stsp_step(twin.adjacency, twin.traces, twin.attention, o0,
                       None, 1, "eval")
    op = build_operator(pruned, twin.diffusion_steps)
    inputs, _ = diffuse(op, init_signal(o0, twin.n_nodes))
    total = o0.value.copy()
    for i in range(1, twin.n_nodes):
        total = total + conv_bn_sn_forward(twin.nodes[i], inputs[i - 1],
                                           "eval").value
    np.testing.assert_allclose(out.value,
                               avgpool2x2(GradNode(0.5 * total)).value,
                               atol=1e-15)


def test_layer_zero_input_zero_output_with_frozen_biases():
    layer = small_layer()
    for node in layer.nodes:
        node.bias.value[:] = 0.0
    layer.reset(1)
    out, _ = layer_forward(layer, GradNode(np.zeros((1, 4, 8, 8))), 1, "train",
                           rng=Rng(4))
    np.testing.assert_array_equal(out.value, np.zeros((1, 4, 2, 2)))


def test_layer_channel_mismatch_names_phase():
    layer = small_layer()
    layer.reset(1)
    with pytest.raises(DimensionError, match="source"):
        layer_forward(layer, GradNode(np.zeros((1, 3, 8, 8))), 1, "eval")


# ---------------------------------------------------------------------------
# network forward
# ---------------------------------------------------------------------------

def test_network_eval_deterministic():
    net = small_net()
    frames = spikes_input(5, b=2, t=2)
    a, _ = network_forward(net, frames, mode="eval")
    b, _ = network_forward(net, frames, mode="eval")
    np.testing.assert_array_equal(a.value, b.value)


def test_network_single_timestep_logits():
    net = small_net(timesteps=1)
    frames = spikes_input(6, b=1, t=1)
    logits, trace = network_forward(net, frames, mode="eval")
    assert logits.value.shape == (1, 3)
    assert trace.layers[0].timesteps == 1


def test_network_permuting_class_rows_permutes_logits():
    net = small_net()
    frames = spikes_input(7, b=2, t=2)
    base, _ = network_forward(net, frames, mode="eval")
    perm = np.array([2, 0, 1])
    net.classifier_w.value = net.classifier_w.value[perm]
    net.classifier_b.value = net.classifier_b.value[perm]
    permuted, _ = network_forward(net, frames, mode="eval")
    np.testing.assert_array_equal(permuted.value, base.value[:, perm])


def test_network_rejects_wrong_frame_count():
    net = small_net(timesteps=2)
    with pytest.raises(DimensionError):
        network_forward(net, spikes_input(8, b=1, t=3), mode="eval")


def test_network_rejects_wrong_channels():
    net = small_net()
    frames = np.zeros((1, 2, 3, 8, 8))
    with pytest.raises(DimensionError):
        network_forward(net, frames, mode="eval")


# ---------------------------------------------------------------------------
# reset / state isolation
# ---------------------------------------------------------------------------

def test_reset_restores_initial_state():
    net = small_net()
    frames = spikes_input(9, b=1, t=2)
    first, _ = network_forward(net, frames, mode="eval")
    second, _ = network_forward(net, frames, mode="eval")
    np.testing.assert_array_equal(first.value, second.value)
    reset_state(net, 1)
    for layer in net.layers:
        np.testing.assert_array_equal(layer.adjacency.s.value,
                                      np.ones((1, 3, 3)))
        for tr in layer.traces.traces:
            np.testing.assert_array_equal(tr.value, np.zeros((1, 4)))
        assert layer.prev_outs is None
    assert net.encoder.lif.membrane is None


def test_state_isolation_across_interleaved_samples():
    net = small_net()
    sample_a = spikes_input(10, b=1, t=2)
    sample_b = spikes_input(11, b=1, t=2)
    alone_a, _ = network_forward(net, sample_a, mode="eval")
    network_forward(net, sample_b, mode="eval")
    again_a, _ = network_forward(net, sample_a, mode="eval")
    np.testing.assert_array_equal(alone_a.value, again_a.value)


def test_static_variant_adjacency_frozen_across_time():
    net = small_net(beta=1.0, timesteps=3)
    frames = spikes_input(12, b=2, t=3)
    _, trace = network_forward(net, frames, mode="eval")
    expect = np.ones((2, 3, 3)) * topk_mask(np.ones((2, 3, 3)), 2)
    for layer in trace.layers:
        for t in range(layer.timesteps):
            np.testing.assert_array_equal(layer.adjacency[t],
                                          np.ones((2, 3, 3)))
            np.testing.assert_array_equal(layer.adjacency_pruned[t], expect)


def test_shape_contract_over_configurations():
    for n_layers, n_nodes, channels, hw, t_steps in (
            (1, 2, 4, 8, 1), (2, 3, 4, 8, 2), (3, 4, 8, 16, 3)):
        net = MorphNet(in_channels=2, channels=channels, n_classes=5,
                       timesteps=t_steps, rng=Rng(13, 7), n_layers=n_layers,
                       n_nodes=n_nodes, top_k=2, n_heads=2)
        frames = (Rng(14).uniform(size=(2, t_steps, 2, hw, hw)) > 0.8
                  ).astype(float)
        logits, trace = network_forward(net, frames, mode="eval")
        assert logits.value.shape == (2, 5)
        assert len(trace.layers) == n_layers
        for layer in trace.layers:
            assert layer.timesteps == t_steps
            for t in range(t_steps):
                assert layer.adjacency[t].shape == (2, n_nodes, n_nodes)
                assert layer.firing[t].shape == (2, n_nodes)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_readout_weight_gradient_matches_finite_differences():
    net = small_net(smooth=True)
    frames = spikes_input(15, b=2, t=2)
    probe = Rng(16).uniform(-1, 1, (2, 3))

    def forward_scalar():
        logits, _ = network_forward(net, frames, mode="eval",
                                    record_trace=False)
        return logits

    logits = forward_scalar()
    backward(sumnode(mul(logits, GradNode(probe))))
    analytic = net.layers[0].readout_w.grad.copy()

    numeric = numeric_grad(
        lambda: float((forward_scalar().value * probe).sum()),
        net.layers[0].readout_w.value)
    assert rel_err(analytic, numeric) < 1e-3


def test_training_mode_touches_parameters():
    # one SGD step on a nonzero-gradient batch changes classifier,
    # readout, and attention parameters
    net = small_net()
    frames = spikes_input(17, b=4, t=2)
    labels = np.array([0, 1, 2, 0])
    from dgdsnn.training import SgdMomentum, cross_entropy
    opt = SgdMomentum(net.parameters())
    logits, _ = network_forward(net, frames, mode="train", rng=Rng(18))
    loss = cross_entropy(logits, labels)
    before = {
        "classifier": net.classifier_w.value.copy(),
        "readout": net.layers[0].readout_w.value.copy(),
        "attn": net.layers[0].attention.w_head.value.copy(),
    }
    opt.zero_grad()
    backward(loss)
    opt.step(0.5)
    assert not np.array_equal(net.classifier_w.value, before["classifier"])
    assert not np.array_equal(net.layers[0].readout_w.value, before["readout"])
    assert not np.array_equal(net.layers[0].attention.w_head.value,
                              before["attn"])
