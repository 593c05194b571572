import dataclasses

import numpy as np
import pytest

from nnobserver.dynsim import Scenario, check_enclosure, simulate_observer
from nnobserver.models import (
    DEFAULT_POLES,
    DEMO_BOX,
    STEER_LIMIT,
    DesignError,
    DistillationError,
    VehicleParams,
    design_feedback_gain,
    distill_controller,
    distill_with_report,
    vehicle_demo,
    vehicle_plant,
)
from nnobserver.nnet import build_aux_pair, check_bracketing


def eq_matrices(m, Iz, lf, lr, Caf, Car, Vx, R):
    """Written out entry by entry, independent of the package code."""
    a22 = -(2 * Caf + 2 * Car) / (m * Vx)
    a23 = (2 * Caf + 2 * Car) / m
    a24 = (-2 * Caf * lf + 2 * Car * lr) / (m * Vx)
    a42 = -(2 * Caf * lf - 2 * Car * lr) / (Iz * Vx)
    a43 = (2 * Caf * lf - 2 * Car * lr) / Iz
    a44 = -(2 * Caf * lf * lf + 2 * Car * lr * lr) / (Iz * Vx)
    A = [[0, 1, 0, 0], [0, a22, a23, a24], [0, 0, 0, 1], [0, a42, a43, a44]]
    Bp = [0, 2 * Caf / m, 0, 2 * Caf * lf / Iz]
    rate = Vx / R
    u = [0, (-(2 * Caf * lf - 2 * Car * lr) / (m * Vx) - Vx) * rate, 0, a44 * rate]
    return np.array(A, dtype=float), np.array(Bp), np.array(u)


def test_default_parameter_values():
    p = VehicleParams()
    assert (p.m, p.Iz, p.lf, p.lr, p.Caf, p.Car, p.Vx, p.R) == (1573, 2873, 1.1, 1.58, 80000, 80000, 30, 400)
    plant, u, u_lo, u_hi = vehicle_plant()
    assert plant.A[1, 1] == pytest.approx(-6.7811, abs=1e-4)
    assert plant.A[1, 1] == -320000 / 47190
    np.testing.assert_allclose(plant.B_phi[:, 0], [0, 160000 / 1573, 0, 176000 / 2873], rtol=1e-15)
    assert plant.B_phi[1, 0] == pytest.approx(101.7165, abs=1e-4)
    assert plant.B_phi[3, 0] == pytest.approx(61.2600, abs=1e-4)
    np.testing.assert_array_equal(u_lo, [-1, -3, -1, -1])
    np.testing.assert_array_equal(u_hi, [1, -1, 1, 0])
    assert np.all(u_lo < u.value) and np.all(u.value < u_hi)


def test_formulas_under_perturbation(rng):
    base = np.array([1573, 2873, 1.1, 1.58, 80000, 80000, 30, 400], dtype=float)
    for _ in range(5):
        vals = base * rng.uniform(0.5, 1.5, base.size)
        plant, u, *_ = vehicle_plant(VehicleParams(*vals))
        A, Bp, un = eq_matrices(*vals)
        np.testing.assert_allclose(plant.A, A, rtol=1e-12, atol=0)
        np.testing.assert_allclose(plant.B_phi[:, 0], Bp, rtol=1e-12, atol=0)
        np.testing.assert_allclose(u.value, un, rtol=1e-12, atol=0)
        assert plant.B_phi.min() >= 0 and plant.B_u.min() >= 0


def test_params_must_be_positive():
    with pytest.raises(DesignError):
        VehicleParams(m=0.0)
    with pytest.raises(DesignError):
        VehicleParams(Vx=-1.0)


def test_double_integrator_gain():
    K = design_feedback_gain([[0, 1], [0, 0]], [0, 1], [-1, -2])
    np.testing.assert_allclose(K, [2.0, 3.0], atol=1e-12)


def _sorted(z):
    z = np.asarray(z, dtype=complex)
    return z[np.lexsort((z.imag, z.real))]


def test_vehicle_pole_placement():
    plant, *_ = vehicle_plant()
    K = design_feedback_gain(plant.A, plant.B_phi, DEFAULT_POLES)
    eig = np.linalg.eigvals(plant.A - plant.B_phi @ K[None, :])
    assert np.abs(_sorted(eig) - _sorted(DEFAULT_POLES)).max() <= 1e-6


def test_pole_placement_random(rng):
    for _ in range(5):
        A = rng.standard_normal((3, 3))
        B = rng.standard_normal(3)
        poles = [-1.0 + 0.5j, -1.0 - 0.5j, -3.0]
        K = design_feedback_gain(A, B, poles)
        eig = np.linalg.eigvals(A - np.outer(B, K))
        assert np.abs(_sorted(eig) - _sorted(poles)).max() <= 1e-6


def test_design_errors():
    with pytest.raises(DesignError, match="controllable"):
        design_feedback_gain(np.eye(2), [0, 0], [-1, -2])
    with pytest.raises(DesignError, match="conjugation"):
        design_feedback_gain([[0, 1], [0, 0]], [0, 1], [-1 + 1j, -2])


def test_zero_gain_distills_to_zero():
    net, rep = distill_with_report(np.zeros(3), -np.ones(3), np.ones(3))
    X = np.random.default_rng(1).uniform(-1, 1, (200, 3))
    assert np.abs(net(X)).max() < 1e-12
    assert rep.max_error < 1e-12


def test_scalar_distillation():
    net, rep = distill_with_report([1.0], [-1.0], [1.0], clamp=None)
    assert rep.target_range == 2.0
    assert rep.max_error <= 0.01 * rep.target_range


def test_vehicle_distillation(vehicle):
    net, rep = distill_with_report(vehicle["K"], *DEMO_BOX)
    assert rep.max_error <= rep.limit == pytest.approx(0.05 * rep.target_range)
    assert rep.max_pre_activation <= 1.5 + 1e-12
    assert net.clamp is not None and net.clamp[1][0] == pytest.approx(STEER_LIMIT)
    b = check_bracketing(net, build_aux_pair(net), DEMO_BOX[0], DEMO_BOX[1], samples=2000, seed=0)
    assert b.passed and b.max_violation <= 0.0 and b.max_layer_violation <= 0.0


def test_distillation_failure_reports_best():
    with pytest.raises(DistillationError) as exc:
        distill_with_report([1.0, -1.0], [-1, -1], [1, 1], widths=(1,), tol_frac=1e-9, retries=2)
    assert exc.value.best_error > exc.value.limit


def test_distillation_rejects_bad_box():
    with pytest.raises(DesignError):
        distill_controller([1.0], [1.0], [-1.0])


def test_demo_short_run(tmp_path):
    b = vehicle_demo(horizon=0.5, out_dir=tmp_path)
    assert b.passed and b.certificate.passed
    assert b.trajectory.x.shape == (501, 4)
    for name in ("vehicle_cert.json", "vehicle_traj.csv", "vehicle_report.json"):
        assert (tmp_path / name).exists()


def test_zero_gain_negative_control(vehicle):
    # A has a negative off-diagonal (row 4, column 3); with L = 0 an initial
    # error on x3 drives the lower error on x4 below zero
    plant, net, g = vehicle["plant"], vehicle["net"], vehicle["gains"]
    x0 = np.array([0.2, 0.0, 0.05, 0.0])
    d = np.array([0.0, 0.0, 0.3, 0.0])
    scen = Scenario(x0, x0 - d, x0 + d, vehicle["u"], vehicle["u_lo"], vehicle["u_hi"], horizon=1.0, step=1e-3)
    good = check_enclosure(simulate_observer(plant, net, None, g, scen))
    assert good.passed
    zero = dataclasses.replace(g, L_lo=np.zeros((4, 4)), L_hi=np.zeros((4, 4)))
    bad = check_enclosure(simulate_observer(plant, net, None, zero, scen))
    assert not bad.passed
    assert bad.first_coord == 3 and bad.max_violation > 1e-3
