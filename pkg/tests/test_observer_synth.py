import dataclasses

import numpy as np
import pytest

from nnobserver.conic_core import Status
from nnobserver.nnet import random_network
from nnobserver.observer_synth import (
    LipschitzBounds,
    PlantError,
    PlantModel,
    SynthOptions,
    SynthesisInfeasible,
    assemble_lmi,
    compute_k1,
    compute_k2,
    input_hash,
    is_metzler,
    lift_system,
    lmi_matrix,
    load_certificate,
    plant_from_dict,
    plant_to_dict,
    save_certificate,
    schur_matrix,
    synthesize,
    verify_certificate,
)

SCALAR = PlantModel([[-1.0]], np.zeros((1, 0)), [[1.0]], [[1.0]])
UNOBSERVABLE = PlantModel([[0.5, 1.0], [1.0, 0.5]], np.zeros((2, 0)), np.eye(2), np.zeros((1, 2)))


def test_plant_rejects_negative_B():
    with pytest.raises(PlantError, match="nonnegative orthant"):
        PlantModel([[0.0]], [[-1.0]], [[1.0]], [[1.0]])
    with pytest.raises(PlantError, match="B_u"):
        PlantModel([[0.0]], [[1.0]], [[-0.5]], [[1.0]])


def test_plant_network_dimensions(vehicle):
    with pytest.raises(PlantError):
        vehicle["plant"].check_network(random_network([3, 2, 1]))


def test_lift_scalar():
    L = lift_system(PlantModel([[2.5]], np.zeros((1, 0)), [[1.0]], [[1.0]]))
    np.testing.assert_array_equal(L.A, [[2.5, 0.0], [0.0, 2.5]])


def test_lift_vehicle(vehicle):
    p = vehicle["plant"]
    L = lift_system(p)
    assert L.A.shape == (8, 8)
    np.testing.assert_array_equal(L.A[:4, :4], p.A)
    np.testing.assert_array_equal(L.A[4:, 4:], p.A)
    assert not L.A[:4, 4:].any()
    assert np.count_nonzero(L.A) == 2 * np.count_nonzero(p.A)


def test_k1_values():
    assert compute_k1(None) == 0.0 and compute_k2(None) == 0.0
    assert compute_k1(LipschitzBounds(a1_lo=1, a1_hi=2)) == 15.0
    assert compute_k1(LipschitzBounds(a1_lo=1, a1_hi=1, a2_lo=1, a2_hi=1)) == 6.0
    assert compute_k2(LipschitzBounds(rho_lo=[1.0, 2.0], rho_hi=[0.0, 2.0])) == 9.0


def test_vehicle_lmi_dimensions(vehicle):
    prob = assemble_lmi(vehicle["plant"], vehicle["net"], None, None, 0.0)
    assert prob.m == 46
    sizes = [b.size for b in prob.layout.blocks]
    assert sizes == [8, 32, 10]


def test_lambda_coefficient_placement(vehicle):
    prob = assemble_lmi(vehicle["plant"], vehicle["net"], None, None, 0.0)
    base = np.zeros(prob.d)
    for j in range(10):
        x = base.copy()
        x[40 + j] = 1.0
        D = prob.matrix(x) - prob.matrix(base)
        rows = np.flatnonzero(np.abs(D).sum(axis=1))
        # only the error block (0..7) and the activation block (8..27) move
        assert rows.size and rows.max() < 28
        assert D[8 + j, 8 + j] == pytest.approx(-2.0) and D[18 + j, 18 + j] == pytest.approx(-2.0)


def test_affine_map_matches_direct_assembly(vehicle, rng):
    p, net = vehicle["plant"], vehicle["net"]
    prob = assemble_lmi(p, net, None, None, 0.7)
    x = rng.standard_normal(prob.d)
    x[40:] = np.abs(x[40:])
    M = np.zeros((8, 8))
    m = x[8:40].reshape(2, 4, 4)
    M[:4, :4], M[4:, 4:] = m[0], m[1]
    direct = lmi_matrix(p, net, x[:8], M, x[40:], 0.7)
    np.testing.assert_allclose(prob.matrix(x), direct, atol=1e-12)


def test_no_network_reduces_to_classical_form():
    prob = assemble_lmi(SCALAR, None, None, None, 0.0)
    q, m = 0.3, 0.2
    got = prob.matrix(np.array([q, q, m, m]))
    qa = 2 * q * (-1) - 2 * m
    ref = np.array([
        [qa, 0, q, 0, q, 0],
        [0, qa, 0, q, 0, q],
        [q, 0, -1, 0, 0, 0],
        [0, q, 0, -1, 0, 0],
        [q, 0, 0, 0, -1, 0],
        [0, q, 0, 0, 0, -1],
    ])
    np.testing.assert_allclose(got, ref, atol=1e-15)


def test_scalar_synthesis_and_grid_oracle():
    g = synthesize(SCALAR, None)
    assert verify_certificate(g, SCALAR, None).passed
    # grid oracle: points with -2q - 2m + 2 q^2 < 0 exist, so the LMI is feasible
    qs = np.linspace(0.01, 2, 50)
    ms = np.linspace(-2, 5, 50)
    assert any(-2 * q - 2 * m + 2 * q * q < 0 for q in qs for m in ms)


def test_unobservable_infeasible_three_seeds():
    for seed in range(3):
        with pytest.raises(SynthesisInfeasible) as exc:
            synthesize(UNOBSERVABLE, None, SynthOptions(seed=seed))
        assert exc.value.status is Status.INFEASIBLE and exc.value.margin < 1e-7


def test_vehicle_certificate(vehicle):
    g = vehicle["gains"]
    rep = verify_certificate(g, vehicle["plant"], vehicle["net"])
    assert rep.passed and g.margin_psd >= 1e-7
    assert is_metzler(vehicle["plant"].A - g.L_lo @ vehicle["plant"].C)


def test_gain_recovery(vehicle):
    g = vehicle["gains"]
    M = np.zeros((8, 8))
    M[:4, :4] = g.Q_diag[:4, None] * g.L_lo
    M[4:, 4:] = g.Q_diag[4:, None] * g.L_hi
    np.testing.assert_allclose(np.diag(g.Q_diag) @ g.L_tilde, M, rtol=1e-10)
    np.testing.assert_allclose(g.M, M, rtol=1e-10)


def test_metzler_fault_injection(vehicle):
    g = vehicle["gains"]
    p = vehicle["plant"]
    E = p.A - g.L_lo @ p.C
    # force entry (0, 1) of A - L_lo C to -0.1 by editing column 0 of L_lo (C[0] picks x2)
    L = g.L_lo.copy()
    L[0, 0] += E[0, 1] + 0.1
    bad = dataclasses.replace(g, L_lo=L)
    rep = verify_certificate(bad, p, vehicle["net"], samples=100)
    assert (p.A - L @ p.C)[0, 1] == pytest.approx(-0.1)
    assert not rep.metzler_ok and not rep.passed


def test_is_metzler_examples():
    assert is_metzler([[-5, 0], [0.1, -1]])
    assert not is_metzler([[0, -1e-6], [0, 0]], 1e-12)
    assert is_metzler(np.diag([-1.0, 3.0, 2.0]))
    assert is_metzler([[-1, 2], [0, -3]])
    with pytest.raises(ValueError):
        is_metzler(np.ones((2, 3)))


def test_positivity_condition_equivalence(rng):
    # a diagonal S making X + S >= 0 exists iff the off-diagonals of X are >= 0
    for _ in range(200):
        X = rng.standard_normal((4, 4))
        if rng.random() < 0.5:
            off = ~np.eye(4, dtype=bool)
            X[off] = np.abs(X[off])
        S = np.diag(np.maximum(0.0, -np.diag(X)))
        exists = np.all(X + S >= 0)
        assert exists == is_metzler(X, 0.0)


def test_schur_consistency(vehicle):
    g = vehicle["gains"]
    p, net = vehicle["plant"], vehicle["net"]
    full = lmi_matrix(p, net, g.Q_diag, g.M, g.lam, g.k1)
    red = schur_matrix(p, net, g.Q_diag, g.L_tilde, g.lam, g.k1)
    assert np.linalg.eigvalsh(full).max() < 0 and np.linalg.eigvalsh(red).max() < 0
    # the reduction is exact: the Schur complement of the -I blocks
    k = 28
    Bblk = full[:8, k:]
    top = full[:k, :k].copy()
    top[:8, :8] += Bblk @ Bblk.T
    np.testing.assert_allclose(top, red, atol=1e-9)


def test_joint_scaling(vehicle):
    g = vehicle["gains"]
    p, net = vehicle["plant"], vehicle["net"]
    lift = lift_system(p)
    X = np.diag(g.Q_diag) @ lift.A - g.M @ lift.C
    for c in (0.5, 2.0):
        gc = dataclasses.replace(g, Q_diag=c * g.Q_diag, lam=c * g.lam)
        np.testing.assert_allclose(gc.L_tilde, g.L_tilde)
        np.testing.assert_allclose(np.diag(gc.Q_diag) @ lift.A - gc.M @ lift.C, c * X, rtol=1e-12)
        rep = verify_certificate(gc, p, net, samples=200)
        assert rep.passed


def test_nonlinear_k1_enters_lmi():
    bounds = LipschitzBounds(a1_lo=0.1, a1_hi=0.1)
    p = PlantModel([[-2.0, 0.0], [1.0, -3.0]], np.zeros((2, 0)), np.eye(2), np.eye(2), nonlin=bounds)
    g = synthesize(p, None)
    assert g.k1 == pytest.approx(0.06)
    assert verify_certificate(g, p, None).passed


def test_certificate_round_trip(vehicle, tmp_path):
    g = vehicle["gains"]
    back = load_certificate(save_certificate(g, tmp_path / "c.json"))
    for a, b in ((g.L_lo, back.L_lo), (g.L_hi, back.L_hi), (g.Q_diag, back.Q_diag), (g.lam, back.lam)):
        assert np.array_equal(a, b)
    assert back.margin_psd == g.margin_psd and back.problem_hash == g.problem_hash
    assert back.sector == g.sector


def test_plant_json_round_trip_and_hash(vehicle):
    p = vehicle["plant"]
    q = plant_from_dict(plant_to_dict(p))
    assert np.array_equal(p.A, q.A) and np.array_equal(p.C, q.C)
    assert input_hash(p, vehicle["net"]) == input_hash(q, vehicle["net"])
    assert input_hash(p, vehicle["net"]) != input_hash(p, random_network([4, 5, 5, 1]))
