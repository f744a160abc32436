import numpy as np
import pytest

from dgdsnn.diffusion import (
    build_operator,
    diffuse,
    dirichlet_energy,
    dirichlet_energy_pairwise,
    energy_decay_profile,
    graph_adjacency,
    init_signal,
    verify_gradient_flow,
)
from dgdsnn.numgrad import (
    ContractError,
    GradNode,
    ParameterError,
    Rng,
    backward,
    mul,
    spectral_range,
    sumnode,
)
from dgdsnn.stsp import topk_mask
from helpers import numeric_grad, rel_err


def random_pruned(rng, n, k=None):
    k = k or min(3, n)
    raw = rng.uniform(0.05, 1.0, (n, n))
    return raw * topk_mask(raw, k)


# ---------------------------------------------------------------------------
# operator construction
# ---------------------------------------------------------------------------

def test_operator_all_ones_2x2():
    op = build_operator(np.ones((2, 2)), 1)
    np.testing.assert_array_equal(op.degree.value, [2.0, 2.0])
    np.testing.assert_allclose(op.p.value, np.full((2, 2), 0.5), atol=0)


def test_operator_2node_path():
    op = build_operator(np.array([[0.0, 1.0], [1.0, 0.0]]), 1)
    np.testing.assert_allclose(op.p.value, [[0.0, 1.0], [1.0, 0.0]], atol=0)
    lo, hi = spectral_range(op.p.value)
    assert abs(lo + 1) < 1e-10 and abs(hi - 1) < 1e-10


def test_operator_symmetrizes_asymmetric_input():
    a = build_operator(np.array([[0.0, 2.0], [0.0, 0.0]]), 1)
    b = build_operator(np.array([[0.0, 1.0], [1.0, 0.0]]), 1)
    np.testing.assert_allclose(a.p.value, b.p.value, atol=1e-15)


def test_operator_rejects_negative_entries():
    with pytest.raises(ContractError):
        build_operator(np.array([[0.0, -1.0], [1.0, 0.0]]), 1)


def test_operator_symmetric_and_bounded_on_random_pruned():
    rng = Rng(2020)
    for _ in range(50):
        n = int(rng.integers(3, 17))
        op = build_operator(random_pruned(rng, n), 1)
        p = op.p.value
        assert np.abs(p - p.T).max() < 1e-12
        lo, hi = spectral_range(p)
        assert -1 - 1e-8 <= lo and hi <= 1 + 1e-8


# ---------------------------------------------------------------------------
# signal init / diffusion
# ---------------------------------------------------------------------------

def test_init_signal_zero_source():
    sig = init_signal(GradNode(np.zeros((2, 3, 4, 4))), 5)
    np.testing.assert_array_equal(sig.x.value, np.zeros((2, 5, 48)))


def test_init_signal_row0_roundtrip():
    src = Rng(1).uniform(size=(2, 3, 4, 4))
    sig = init_signal(GradNode(src), 4)
    np.testing.assert_array_equal(sig.x.value[:, 0, :].reshape(2, 3, 4, 4), src)
    np.testing.assert_array_equal(sig.x.value[:, 1:, :], np.zeros((2, 3, 48)))


def test_init_signal_single_node():
    sig = init_signal(GradNode(np.ones((1, 2, 2, 2))), 1)
    assert sig.x.value.shape == (1, 1, 8)


def test_diffuse_zero_steps_is_identity():
    rng = Rng(2)
    op = build_operator(random_pruned(rng, 3)[None], 0)
    src = GradNode(rng.uniform(size=(1, 2, 4, 4)))
    sig = init_signal(src, 3)
    _, diffused = diffuse(op, sig)
    np.testing.assert_array_equal(diffused.x.value, sig.x.value)


def test_diffuse_all_ones_two_nodes():
    src_val = Rng(3).uniform(size=(1, 2, 4, 4))
    op = build_operator(np.ones((1, 2, 2)), 1)
    inputs, _ = diffuse(op, init_signal(GradNode(src_val), 2))
    np.testing.assert_allclose(inputs[0].value, 0.5 * src_val, atol=1e-15)


def test_diffuse_idempotent_operator():
    # P = 0.5 * ones(2,2) satisfies P^2 = P, so M=2 equals M=1
    src_val = Rng(4).uniform(size=(1, 2, 4, 4))
    one = diffuse(build_operator(np.ones((1, 2, 2)), 1),
                  init_signal(GradNode(src_val), 2))[0][0].value
    two = diffuse(build_operator(np.ones((1, 2, 2)), 2),
                  init_signal(GradNode(src_val), 2))[0][0].value
    np.testing.assert_allclose(one, two, atol=1e-15)


def test_diffusion_differentiable_in_adjacency_and_signal():
    rng = Rng(5)
    s_val = random_pruned(rng, 3)[None] + 0.05
    src_val = rng.uniform(0.1, 1.0, (1, 2, 2, 2))
    probe = rng.uniform(-1, 1, (1, 2, 2, 2))

    def run():
        op = build_operator(GradNode(s_val), 2)
        sig = init_signal(GradNode(src_val), 3)
        return diffuse(op, sig)[0][1]

    def scalar():
        return float((run().value * probe).sum())

    s_leaf = GradNode(s_val)
    src_leaf = GradNode(src_val)
    out = diffuse(build_operator(s_leaf, 2), init_signal(src_leaf, 3))[0][1]
    backward(sumnode(mul(out, GradNode(probe))))
    assert rel_err(s_leaf.grad, numeric_grad(scalar, s_val)) < 1e-4
    assert rel_err(src_leaf.grad, numeric_grad(scalar, src_val)) < 1e-4


# ---------------------------------------------------------------------------
# Dirichlet energy
# ---------------------------------------------------------------------------

def test_energy_zero_signal():
    s = np.ones((3, 3)) - np.eye(3)
    assert dirichlet_energy(np.zeros((3, 2)), s) == 0.0


def test_energy_kernel_signal():
    rng = Rng(6)
    s = random_pruned(rng, 5)
    s = (s + s.T) / 2
    d = s.sum(axis=1)
    y = np.sqrt(d)[:, None]
    assert abs(dirichlet_energy(y, s)) < 1e-12


def test_energy_two_node_path_antisymmetric():
    s = np.array([[0.0, 1.0], [1.0, 0.0]])
    y = np.array([[1.0], [-1.0]])
    assert dirichlet_energy(y, s) == pytest.approx(4.0, abs=1e-12)
    assert dirichlet_energy_pairwise(y, s) == pytest.approx(4.0, abs=1e-12)


def test_energy_trace_form_matches_pairwise_oracle():
    rng = Rng(7)
    for _ in range(40):
        n = int(rng.integers(2, 12))
        s = random_pruned(rng, n)
        s = (s + s.T) / 2
        y = rng.normal(size=(n, 5))
        a = dirichlet_energy(y, s)
        b = dirichlet_energy_pairwise(y, s)
        assert abs(a - b) < 1e-9
        assert a >= -1e-12


def test_energy_batched():
    rng = Rng(8)
    s = np.stack([(m := random_pruned(rng, 4), (m + m.T) / 2)[1]
                  for _ in range(3)])
    y = rng.normal(size=(3, 4, 2))
    batched = dirichlet_energy(y, s)
    for i in range(3):
        assert batched[i] == pytest.approx(dirichlet_energy(y[i], s[i]),
                                           abs=1e-12)


# ---------------------------------------------------------------------------
# gradient-flow identity and decay profiles
# ---------------------------------------------------------------------------

def test_gradient_flow_residual_on_random_operators():
    rng = Rng(9)
    for _ in range(20):
        n = int(rng.integers(3, 17))
        op = build_operator(random_pruned(rng, n), 1)
        y = rng.normal(size=(n, 4))
        assert verify_gradient_flow(op, y) < 1e-12


def test_gradient_flow_zero_signal():
    op = build_operator(np.ones((3, 3)), 1)
    assert verify_gradient_flow(op, np.zeros((3, 2))) == 0.0


def test_gradient_flow_hand_2x2():
    op = build_operator(np.array([[0.0, 1.0], [1.0, 0.0]]), 1)
    assert verify_gradient_flow(op, np.array([[1.0], [-1.0]])) < 1e-15


def test_decay_profile_matches_eigen_oracle():
    rng = Rng(10)
    for _ in range(10):
        n = int(rng.integers(3, 10))
        s = random_pruned(rng, n)
        op = build_operator(s, 1)
        y0 = rng.normal(size=(n, 3))
        profile = energy_decay_profile(op, y0, 8)

        # oracle: expand y0 in the eigenbasis of L = I - P
        p = op.p.value
        lam, vecs = np.linalg.eigh(np.eye(n) - p)
        coeff = vecs.T @ y0
        for k, e in enumerate(profile):
            expect = (lam * (1 - lam) ** (2 * k) * (coeff ** 2).sum(axis=1)).sum()
            assert abs(e - expect) < 1e-8 * max(1.0, abs(expect))
        for a, b in zip(profile, profile[1:]):
            assert b <= a + 1e-9


def test_decay_profile_constant_on_bipartite_boundary():
    op = build_operator(np.array([[0.0, 1.0], [1.0, 0.0]]), 1)
    profile = energy_decay_profile(op, np.array([[1.0], [-1.0]]), 6)
    np.testing.assert_allclose(profile, [4.0] * 7, atol=1e-9)


def test_decay_profile_zero_on_kernel():
    s = np.ones((3, 3))
    op = build_operator(s, 1)
    d = ((s + s.T) / 2).sum(axis=1)
    y0 = np.sqrt(d)[:, None]
    profile = energy_decay_profile(op, y0, 5)
    np.testing.assert_allclose(profile, np.zeros(6), atol=1e-11)


def test_decay_profile_requires_steps():
    op = build_operator(np.ones((2, 2)), 1)
    with pytest.raises(ParameterError):
        energy_decay_profile(op, np.ones((2, 1)), 0)


def test_euler_map_diverges_beyond_half_step():
    # explicit Euler with eta=0.6 on the lambda=2 mode grows energy 1.96x
    op = build_operator(np.array([[0.0, 1.0], [1.0, 0.0]]), 1)
    p = op.p.value
    l_norm = np.eye(2) - p
    y = np.array([[1.0], [-1.0]])     # lambda = 2 eigenmode
    s_sym = op.s_sym.value
    e_prev = dirichlet_energy(y, s_sym)
    euler = np.eye(2) - 2 * 0.6 * l_norm
    for _ in range(4):
        y = euler @ y
        e = dirichlet_energy(y, s_sym)
        assert e / e_prev == pytest.approx(1.96, abs=1e-9)
        e_prev = e


# ---------------------------------------------------------------------------
# graph constructors
# ---------------------------------------------------------------------------

def test_graph_constructors():
    path = graph_adjacency("path", 4)
    assert path.sum() == 6.0 and (np.diag(path) == 0).all()
    comp = graph_adjacency("complete", 3)
    np.testing.assert_array_equal(comp, np.ones((3, 3)) - np.eye(3))
    rand = graph_adjacency("random", 5, rng=Rng(11))
    assert ((rand > 0).sum(axis=1) <= 3).all()
    with pytest.raises(ParameterError):
        graph_adjacency("torus", 4)
