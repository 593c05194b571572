import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnobserver.nnet import Activation, NetworkError, build_aux_pair, random_network, sample_ordered_triples
from nnobserver.sector_qc import (
    SectorBound,
    SectorError,
    build_N,
    build_qc_matrices,
    evaluate_pi,
    evaluate_pi_sum,
    global_sector,
    local_offset_sector,
    psi_m_psi,
    stacked_differences,
)


@pytest.mark.parametrize("name,expected", [
    ("tanh", (0.0, 1.0)), ("relu", (0.0, 1.0)), ("sigmoid", (0.0, 0.25)), ("leaky_relu(0.1)", (0.1, 1.0)),
])
def test_global_sectors(name, expected):
    s = global_sector(Activation.parse(name))
    assert (s.alpha, s.beta) == expected


def test_sector_ordering_enforced():
    with pytest.raises(SectorError):
        SectorBound(1.0, 0.0)
    with pytest.raises(SectorError):
        local_offset_sector("tanh", 1.0, -1.0, 0.0)


def test_tanh_local_sector_figure_value():
    s = local_offset_sector("tanh", -2.0, 2.0, 0.0)
    assert s.alpha == pytest.approx(math.tanh(2.0) / 2.0, abs=2e-9)
    assert s.alpha <= math.tanh(2.0) / 2.0
    assert round(s.alpha, 2) == 0.48
    assert s.beta == pytest.approx(1.0, abs=2e-9) and s.beta >= 1.0


def test_relu_local_sector_affine_piece():
    s = local_offset_sector("relu", 1.0, 3.0, 2.0)
    assert (s.alpha, s.beta) == (1.0, 1.0)


def test_sigmoid_local_sector_against_dense_refinement():
    s = local_offset_sector("sigmoid", -1.0, 1.0, 0.0)
    v = np.linspace(-1.0, 1.0, 1_000_001)
    v = v[np.abs(v) > 1e-9]
    sig = 1.0 / (1.0 + np.exp(-v))
    slopes = (sig - 0.5) / v
    assert abs(s.alpha - slopes.min()) < 1e-6 and abs(s.beta - max(slopes.max(), 0.25)) < 1e-6


@pytest.mark.parametrize("name", ["tanh", "sigmoid", "relu", "leaky_relu(0.2)"])
def test_local_sector_soundness(name):
    act = Activation.parse(name)
    rng = np.random.default_rng(7)
    for _ in range(20):
        lo, hi = np.sort(rng.uniform(-4, 4, 2))
        if hi - lo < 1e-3:
            continue
        vs = rng.uniform(lo, hi)
        sec = local_offset_sector(act, lo, hi, vs)
        v = rng.uniform(lo, hi, 5000)
        v = v[np.abs(v - vs) > 1e-6]
        chord = (act(v) - act(vs)) / (v - vs)
        assert np.all(chord >= sec.alpha - 1e-9) and np.all(chord <= sec.beta + 1e-9)


@settings(max_examples=60, deadline=None)
@given(lo=st.floats(-3, 0), hi=st.floats(0.01, 3), t=st.floats(0, 1), shrink=st.floats(0.05, 1))
def test_local_sector_nesting(lo, hi, t, shrink):
    vs = min(max(lo + t * (hi - lo), lo), hi)
    outer = local_offset_sector("tanh", lo, hi, vs)
    inner = local_offset_sector("tanh", vs - shrink * (vs - lo), vs + shrink * (hi - vs) + 1e-9, vs)
    assert inner.alpha >= outer.alpha - 2e-9 and inner.beta <= outer.beta + 2e-9


def test_build_N_single_layer():
    net = random_network([3, 4, 2], seed=1)
    pair = build_aux_pair(net)
    N = build_N(pair)
    assert not N.N_v_w.any() and not N.N_phi_x.any()
    Wn, Wp = pair.lower[0], pair.upper[0]
    np.testing.assert_array_equal(N.N_v_x, np.block([[Wp, -Wn], [-Wn, Wp]]))


def test_build_N_nonnegative_net_has_no_negative_part():
    net = random_network([3, 4, 4, 1], seed=1)
    net = type(net)(tuple(np.abs(W) for W in net.weights), net.biases, net.activation)
    N = build_N(build_aux_pair(net))
    assert np.all(N.full >= 0.0)


@pytest.mark.parametrize("widths", [[3, 4, 5, 2], [2, 3, 3, 3, 1]])
def test_N_identity(widths):
    net = random_network(widths, seed=4)
    pair = build_aux_pair(net)
    N = build_N(pair).full
    xl, x, xh = sample_ordered_triples(-2 * np.ones(widths[0]), 2 * np.ones(widths[0]), 100,
                                       np.random.default_rng(0))
    lhs, rhs = stacked_differences(net, pair, xl, x, xh)
    err = np.abs(lhs - rhs @ N.T).max() / max(1.0, np.abs(lhs).max())
    assert err <= 1e-10


def test_qc_blocks_zero_lambda():
    qc = build_qc_matrices(SectorBound(0.0, 1.0), np.zeros(3))
    assert not qc.F_ab.any() and not qc.F_apb.any() and not qc.F_l.any()


def test_qc_blocks_unit_lambda():
    qc = build_qc_matrices(SectorBound(0.0, 1.0), np.ones(3))
    np.testing.assert_array_equal(qc.F_ab, np.zeros((6, 6)))
    np.testing.assert_array_equal(qc.F_apb, np.eye(6))
    np.testing.assert_array_equal(qc.F_l, -2 * np.eye(6))


def test_qc_product_identity_random():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = np.sort(rng.uniform(-1, 2, 2))
        lam = rng.uniform(0, 5, 4)
        sec = SectorBound(a, b)
        # Psi = [[b I, -I], [-a I, I]] per side, M = [[0, lam], [lam, 0]]
        n = lam.size
        I, Z = np.eye(n), np.zeros((n, n))
        Psi_side = np.block([[b * I, -I], [-a * I, I]])
        Msd = np.block([[Z, np.diag(lam)], [np.diag(lam), Z]])
        P = Psi_side.T @ Msd @ Psi_side  # ordering (dv, dw) of one side
        ref = np.zeros((4 * n, 4 * n))
        for s in range(2):
            idx = np.r_[s * n:(s + 1) * n, 2 * n + s * n:2 * n + (s + 1) * n]
            ref[np.ix_(idx, idx)] = P
        np.testing.assert_allclose(build_qc_matrices(sec, lam).full, ref, atol=1e-12)
        np.testing.assert_allclose(psi_m_psi(sec, lam), ref, atol=1e-12)


def test_negative_lambda_rejected():
    with pytest.raises(SectorError):
        build_qc_matrices(SectorBound(0, 1), [1.0, -0.1])


def test_pi_trivial_cases():
    net = random_network([3, 4, 4, 1], seed=2)
    pair = build_aux_pair(net)
    x = np.array([0.2, -0.3, 0.5])
    assert evaluate_pi(net, pair, x, x, x, np.ones(8)) == 0.0
    assert evaluate_pi(net, pair, x - 1, x, x + 1, np.zeros(8)) == 0.0
    with pytest.raises(NetworkError):
        evaluate_pi(net, pair, x + 1, x, x - 1, np.ones(8))


@pytest.mark.parametrize("name", ["tanh", "relu", "sigmoid", "leaky_relu(0.1)"])
def test_pi_nonnegative_and_double_sum(name):
    net = random_network([3, 5, 4, 2], seed=6, activation=name, scale=2.0)
    pair = build_aux_pair(net)
    rng = np.random.default_rng(1)
    xl, x, xh = sample_ordered_triples(-3 * np.ones(3), 3 * np.ones(3), 10_000, rng)
    lam = rng.uniform(0, 3, net.n_phi)
    pi = evaluate_pi(net, pair, xl, x, xh, lam)
    assert pi.min() >= -1e-9
    np.testing.assert_allclose(evaluate_pi_sum(net, pair, xl[:5], x[:5], xh[:5], lam), pi[:5],
                               rtol=1e-12, atol=1e-12)
