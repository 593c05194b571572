"""Lateral vehicle case study: plant, state feedback, distilled tanh controller, demo run."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dynsim import (
    ConstantInput,
    EnclosureReport,
    LyapunovReport,
    Metrics,
    Scenario,
    Trajectory,
    check_enclosure,
    error_metrics,
    export_csv,
    lyapunov_trace,
    simulate_observer,
)
from .nnet import Activation, NeuralNet, aux_forward, build_aux_pair, forward
from .observer_synth import (
    CertificateReport,
    ObserverGains,
    PlantModel,
    SynthOptions,
    compute_k2,
    save_certificate,
    synthesize,
    verify_certificate,
)

__all__ = [
    "DesignError",
    "DistillationError",
    "VehicleParams",
    "vehicle_plant",
    "design_feedback_gain",
    "DistillReport",
    "distill_with_report",
    "distill_controller",
    "DemoBundle",
    "vehicle_demo",
    "DEFAULT_POLES",
    "DEMO_BOX",
]

DEFAULT_POLES = (-2 + 2j, -2 - 2j, -5.0, -6.0)
STEER_LIMIT = math.pi / 6
# operating box for distillation and bracketing; it contains the run from the
# default start to the curvature-induced equilibrium near (-2.4, 2.13, 0.076, 0)
DEMO_BOX = (np.array([-3.0, -1.0, -0.5, -1.0]), np.array([1.0, 3.0, 0.5, 1.0]))


class DesignError(ValueError):
    pass


class DistillationError(RuntimeError):
    def __init__(self, best_error: float, limit: float):
        self.best_error = best_error
        self.limit = limit
        super().__init__(f"distillation failed: best held-out error {best_error:.3e} > limit {limit:.3e}")


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1573.0
    Iz: float = 2873.0
    lf: float = 1.1
    lr: float = 1.58
    Caf: float = 80000.0
    Car: float = 80000.0
    Vx: float = 30.0
    R: float = 400.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (v > 0.0 and math.isfinite(v)):
                raise DesignError(f"vehicle parameter {k} must be positive, got {v}")

    @property
    def yaw_rate_des(self) -> float:
        return self.Vx / self.R


def vehicle_plant(p: VehicleParams = VehicleParams()):
    """Returns ``(plant, u_nominal, u_lo, u_hi)`` for the bicycle lateral-error model."""
    m, Iz, lf, lr, Caf, Car, Vx = p.m, p.Iz, p.lf, p.lr, p.Caf, p.Car, p.Vx
    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -(2 * Caf + 2 * Car) / (m * Vx), (2 * Caf + 2 * Car) / m, (-2 * Caf * lf + 2 * Car * lr) / (m * Vx)],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, -(2 * Caf * lf - 2 * Car * lr) / (Iz * Vx), (2 * Caf * lf - 2 * Car * lr) / Iz,
         -(2 * Caf * lf ** 2 + 2 * Car * lr ** 2) / (Iz * Vx)],
    ])
    B_phi = np.array([[0.0], [2 * Caf / m], [0.0], [2 * Caf * lf / Iz]])
    # printed as is, including the (1, 2) entry
    B_u = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    C = np.array([[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 0.0, 1.0]])
    u = np.array([0.0, -(2 * Caf * lf - 2 * Car * lr) / (m * Vx) - Vx, 0.0,
                  -(2 * Caf * lf ** 2 + 2 * Car * lr ** 2) / (Iz * Vx)]) * p.yaw_rate_des
    plant = PlantModel(A, B_phi, B_u, C, state_labels=("e1", "e1_dot", "e2", "e2_dot"))
    u_lo = np.array([-1.0, -3.0, -1.0, -1.0])
    u_hi = np.array([1.0, -1.0, 1.0, 0.0])
    return plant, ConstantInput(u), u_lo, u_hi


def design_feedback_gain(A, B, desired_poles: Sequence[complex]) -> np.ndarray:
    """Single-input Ackermann formula; ``eig(A - B K)`` equals ``desired_poles``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(-1, 1)
    n = A.shape[0]
    poles = np.asarray(desired_poles, dtype=complex)
    if A.shape != (n, n) or B.shape[0] != n:
        raise DesignError("A must be square and B a column with matching rows")
    if poles.size != n:
        raise DesignError(f"need {n} poles, got {poles.size}")
    if not np.allclose(np.sort_complex(poles), np.sort_complex(np.conj(poles)), atol=1e-9):
        raise DesignError("desired poles must be closed under complex conjugation")
    ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
    if np.linalg.matrix_rank(ctrb) < n:
        raise DesignError("(A, B) is not controllable")
    coeffs = np.real(np.poly(poles))
    phi_A = sum(c * np.linalg.matrix_power(A, n - k) for k, c in enumerate(coeffs))
    last = np.zeros((1, n))
    last[0, -1] = 1.0
    return (last @ np.linalg.solve(ctrb, phi_A)).ravel()


# --- distillation -------------------------------------------------------------

@dataclass(frozen=True)
class DistillReport:
    max_error: float
    limit: float
    target_range: float
    seed: int
    attempts: int
    max_pre_activation: float


def _scaled_layer(rng, n_out, n_in, in_lo, in_hi, sup):
    W = rng.uniform(-1.0, 1.0, (n_out, n_in))
    b = rng.uniform(-0.2, 0.2, n_out)
    c, r = 0.5 * (in_lo + in_hi), 0.5 * (in_hi - in_lo)
    peak = np.abs(W @ c + b) + np.abs(W) @ r
    s = sup / peak
    return W * s[:, None], b * s


def distill_with_report(K, box_lo, box_hi, widths: Sequence[int] = (5, 5), seed: int = 0,
                        samples: int = 2000, holdout: int = 500, hidden_sup: float = 0.5,
                        tol_frac: float = 0.05, retries: int = 5, clamp: Optional[float] = STEER_LIMIT):
    """Fit a tanh network to ``-K x`` on a box: random scaled hidden layers, least-squares output layer.

    Hidden rows are scaled so the largest pre-activation over the box (bounded
    with the interval pair) equals ``hidden_sup``.
    """
    K = np.atleast_1d(np.asarray(K, dtype=float)).ravel()
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    if box_lo.shape != K.shape or box_hi.shape != K.shape:
        raise DesignError("box and K must have the same length")
    if np.any(box_lo >= box_hi):
        raise DesignError("distillation box needs box_lo < box_hi")
    if not 0.0 < hidden_sup <= 1.5:
        raise DesignError("hidden_sup must lie in (0, 1.5]")
    n = K.size
    target_range = float(np.abs(K) @ (box_hi - box_lo))
    limit = max(tol_frac * target_range, 1e-12)
    act = Activation.parse("tanh")
    best = math.inf
    for attempt in range(retries):
        s = seed + 7919 * attempt
        rng = np.random.default_rng(s)
        Ws, bs = [], []
        lo, hi = box_lo, box_hi
        for w in widths:
            W, b = _scaled_layer(rng, w, lo.size, lo, hi, hidden_sup)
            Ws.append(W)
            bs.append(b)
            # interval image of the layer on the current box
            c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
            v_c, v_r = W @ c + b, np.abs(W) @ r
            lo, hi = np.tanh(v_c - v_r), np.tanh(v_c + v_r)
        X = box_lo + rng.random((samples, n)) * (box_hi - box_lo)
        Xh = box_lo + rng.random((holdout, n)) * (box_hi - box_lo)
        probe = NeuralNet(tuple(Ws) + (np.zeros((1, widths[-1])),), tuple(bs) + (np.zeros(1),), act)

        H = np.hstack([forward(probe, X).post[-1], np.ones((samples, 1))])
        coef, *_ = np.linalg.lstsq(H, -X @ K, rcond=None)
        W_out, b_out = coef[:-1][None, :], coef[-1:]
        cl = None if clamp is None else (np.array([-clamp]), np.array([clamp]))
        net = NeuralNet(tuple(Ws) + (W_out,), tuple(bs) + (b_out,), act, cl)
        err = float(np.abs(net(Xh)[:, 0] - (-Xh @ K)).max())
        best = min(best, err)
        if err <= limit:
            lo_t, hi_t = aux_forward(build_aux_pair(net), box_lo, box_hi)
            sup = max(float(np.max(np.abs(np.concatenate([a, b_])))) for a, b_ in zip(lo_t.pre, hi_t.pre))
            return net, DistillReport(err, limit, target_range, s, attempt + 1, sup)
    raise DistillationError(best, limit)


def distill_controller(K, box_lo, box_hi, widths: Sequence[int] = (5, 5), seed: int = 0, **kw) -> NeuralNet:
    return distill_with_report(K, box_lo, box_hi, widths, seed, **kw)[0]


# --- demo -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DemoBundle:
    plant: PlantModel
    K: np.ndarray
    net: NeuralNet
    fit: DistillReport
    gains: ObserverGains
    certificate: CertificateReport
    scenario: Scenario
    trajectory: Trajectory
    enclosure: EnclosureReport
    metrics: Metrics
    lyapunov: LyapunovReport
    files: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.enclosure.passed and self.metrics.bounded


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _report_dict(b: DemoBundle) -> dict:
    enc = {k: _jsonable(v) for k, v in b.enclosure.__dict__.items()}
    met = {k: _jsonable(v) for k, v in b.metrics.__dict__.items()}
    met["bounded"] = b.metrics.bounded
    lyap = {k: _jsonable(getattr(b.lyapunov, k)) for k in ("eps", "c2", "c2_bound", "residual")}
    lyap["fits"] = b.lyapunov.fits
    cert = {k: _jsonable(v) for k, v in b.certificate.__dict__.items() if k not in ("bracketing", "notes")}
    cert["bracketing_max_violation"] = b.certificate.bracketing.max_violation if b.certificate.bracketing else 0.0
    cert["passed"] = b.certificate.passed
    cert["notes"] = list(b.certificate.notes)
    return {
        "sign_convention": "controller output phi(x) approximates -K x and enters as + B_phi phi(x)",
        "K": b.K.tolist(),
        "fit": {k: _jsonable(v) for k, v in b.fit.__dict__.items()},
        "certificate": cert,
        "enclosure": enc,
        "metrics": met,
        "lyapunov": lyap,
        "scenario": b.scenario.to_dict(),
        "passed": b.passed,
    }


def vehicle_demo(seed: int = 0, out_dir=None, horizon: float = 10.0, step: float = 1e-3,
                 x0=(0.2, 0.0, 0.05, 0.0), x0_pad=(0.1, 0.1, 0.05, 0.05),
                 params: VehicleParams = VehicleParams(), poles=DEFAULT_POLES,
                 box=DEMO_BOX, tol_psd: float = 1e-7) -> DemoBundle:
    """Plant, pole placement, distillation, synthesis and an observer run.

    ``seed`` drives the distillation draw and the solver start.  Files are
    written when ``out_dir`` is given.
    """
    plant, u_nom, u_lo, u_hi = vehicle_plant(params)
    K = design_feedback_gain(plant.A, plant.B_phi, poles)
    net, fit = distill_with_report(K, box[0], box[1], seed=seed)
    opts = SynthOptions(seed=seed, tol_psd=tol_psd, bracket_box=box)
    gains = synthesize(plant, net, opts)
    cert = verify_certificate(gains, plant, net, box=box, seed=seed)
    x0 = np.asarray(x0, dtype=float)
    pad = np.asarray(x0_pad, dtype=float)
    scen = Scenario(x0, x0 - pad, x0 + pad, u_nom, u_lo, u_hi, horizon, step, seed)
    traj = simulate_observer(plant, net, None, gains, scen)
    enc = check_enclosure(traj, 1e-8)
    met = error_metrics(traj)
    lyap = lyapunov_trace(traj, gains, gains.k1, compute_k2(plant.nonlin), plant.B_u, u_lo, u_hi)
    bundle = DemoBundle(plant, K, net, fit, gains, cert, scen, traj, enc, met, lyap)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "certificate": save_certificate(gains, out / "vehicle_cert.json"),
            "trajectory": export_csv(traj, out / "vehicle_traj.csv"),
            "report": out / "vehicle_report.json",
        }
        files["report"].write_text(json.dumps(_report_dict(bundle), indent=1))
        bundle.files.update({k: str(v) for k, v in files.items()})
    return bundle
