"""Fixed-step co-simulation of plant, network controller and interval observer.

Everything runs on one RK4 grid.  The observer state is integrated together
with the plant so the measured output ``y = C x`` is available at every stage.
Batched runs (leading batch axis) share the grid and are used by the
scenario banks in the tests.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .nnet import AuxNetPair, NeuralNet, aux_forward, build_aux_pair, sample_ordered_triples
from .observer_synth import ObserverGains, PlantModel

__all__ = [
    "ScenarioError",
    "SimulationDiverged",
    "BoundWarning",
    "ConstantInput",
    "PiecewiseInput",
    "SinusoidInput",
    "input_from_dict",
    "Scenario",
    "Trajectory",
    "EnclosureReport",
    "Metrics",
    "LyapunovReport",
    "rk4_step",
    "integrate",
    "richardson_ratio",
    "simulate_closed_loop",
    "simulate_observer",
    "simulate_error_bank",
    "check_enclosure",
    "error_metrics",
    "lyapunov_trace",
    "export_csv",
]


class ScenarioError(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    def __init__(self, last_time: float):
        self.last_time = last_time
        super().__init__(f"state became non-finite after t = {last_time:.6g}")


class BoundWarning(UserWarning):
    """Supplied ``f_lo <= f <= f_hi`` evaluators failed a spot check."""


# --- integrator ---------------------------------------------------------------

def rk4_step(f: Callable, t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _steps(horizon: float, h: float) -> int:
    n = int(round(horizon / h))
    if not math.isclose(n * h, horizon, rel_tol=1e-9, abs_tol=1e-12):
        raise ScenarioError(f"horizon {horizon} is not a whole number of steps of {h}")
    return n


def integrate(f: Callable, x0, h: float, steps: int, t0: float = 0.0,
              before_step: Optional[Callable] = None) -> np.ndarray:
    """States on the grid ``t0 + k h``, ``k = 0..steps``; shape ``(steps + 1, *x0.shape)``.

    ``before_step(k, t, x)`` runs before each step (used for zero-order hold).
    """
    x = np.array(x0, dtype=float)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for k in range(steps):
        t = t0 + k * h
        if before_step is not None:
            before_step(k, t, x)
        x = rk4_step(f, t, x, h)
        if not np.all(np.isfinite(x)):
            raise SimulationDiverged(t)
        out[k + 1] = x
    return out


def richardson_ratio(f: Callable, x0, horizon: float, h: float) -> float:
    """``|x_h - x_{h/2}| / |x_{h/2} - x_{h/4}|`` at the final time; about 16 for RK4."""
    finals = []
    for k in (1, 2, 4):
        n = _steps(horizon, h / k)
        finals.append(integrate(f, x0, h / k, n)[-1])
    a = np.linalg.norm(finals[0] - finals[1])
    b = np.linalg.norm(finals[1] - finals[2])
    return float(a / b) if b > 0 else math.inf


# --- inputs --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConstantInput:
    value: np.ndarray

    def __call__(self, t):
        return np.asarray(self.value, dtype=float)

    def to_dict(self):
        return {"kind": "constant", "value": np.asarray(self.value, dtype=float).tolist()}


@dataclass(frozen=True, eq=False)
class PiecewiseInput:
    """Piecewise-constant table: ``values[i]`` holds on ``[times[i], times[i+1])``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if t.ndim != 1 or v.shape[0] != t.size or t.size == 0:
            raise ScenarioError("piecewise input needs one value row per breakpoint")
        if np.any(np.diff(t) <= 0.0):
            raise ScenarioError("piecewise input breakpoints must increase strictly")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        i = max(int(np.searchsorted(self.times, t, side="right")) - 1, 0)
        return self.values[i]

    def to_dict(self):
        return {"kind": "piecewise", "times": self.times.tolist(), "values": self.values.tolist()}


@dataclass(frozen=True, eq=False)
class SinusoidInput:
    center: np.ndarray
    amplitude: np.ndarray
    omega: float = 1.0
    phase: np.ndarray = 0.0

    def __call__(self, t):
        return np.asarray(self.center) + np.asarray(self.amplitude) * np.sin(self.omega * t + np.asarray(self.phase))

    def to_dict(self):
        return {"kind": "sinusoid", "center": np.asarray(self.center, dtype=float).tolist(),
                "amplitude": np.asarray(self.amplitude, dtype=float).tolist(),
                "omega": float(self.omega), "phase": np.broadcast_to(self.phase, np.shape(self.center)).tolist()}

    @classmethod
    def within(cls, u_lo, u_hi, seed: int = 0, omega: float = 1.0, fill: float = 0.9):
        """Sinusoid centred in ``(u_lo, u_hi)`` with amplitude ``fill`` times the half-width."""
        u_lo, u_hi = np.asarray(u_lo, dtype=float), np.asarray(u_hi, dtype=float)
        phase = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, u_lo.shape)
        return cls(0.5 * (u_lo + u_hi), fill * 0.5 * (u_hi - u_lo), omega, phase)


def input_from_dict(d) -> Callable:
    try:
        kind = d["kind"]
        if kind == "constant":
            return ConstantInput(np.asarray(d["value"], dtype=float))
        if kind == "piecewise":
            return PiecewiseInput(d["times"], d["values"])
        if kind == "sinusoid":
            return SinusoidInput(np.asarray(d["center"], dtype=float), np.asarray(d["amplitude"], dtype=float),
                                 float(d.get("omega", 1.0)), np.asarray(d.get("phase", 0.0), dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed input description: {exc}") from None
    raise ScenarioError(f"unknown input kind {kind!r}")


# --- scenario ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Scenario:
    x0: np.ndarray
    x0_lo: np.ndarray
    x0_hi: np.ndarray
    u_signal: Callable
    u_lo: np.ndarray
    u_hi: np.ndarray
    horizon: float = 10.0
    step: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("x0", "x0_lo", "x0_hi", "u_lo", "u_hi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def steps(self) -> int:
        return _steps(self.horizon, self.step)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.step

    def validate(self, plant: Optional[PlantModel] = None) -> None:
        if not (self.step > 0.0 and math.isfinite(self.step)):
            raise ScenarioError("step h must be positive")
        if not self.horizon >= self.step:
            raise ScenarioError("horizon T must be at least one step")
        self.steps
        n = self.x0.size
        if self.x0_lo.shape != (n,) or self.x0_hi.shape != (n,):
            raise ScenarioError("x0_lo, x0 and x0_hi must have the same length")
        if plant is not None and n != plant.n_x:
            raise ScenarioError(f"x0 has length {n}, plant has n_x = {plant.n_x}")
        for i in range(n):
            if not self.x0_lo[i] <= self.x0[i] <= self.x0_hi[i]:
                raise ScenarioError(f"initial state violates x0_lo <= x0 <= x0_hi at coordinate {i}")
        n_u = self.u_lo.size
        if self.u_hi.shape != (n_u,):
            raise ScenarioError("u_lo and u_hi must have the same length")
        if plant is not None and n_u != plant.n_u:
            raise ScenarioError(f"input bounds have length {n_u}, plant has n_u = {plant.n_u}")
        # strict bounds on the grid and at the RK4 half steps
        ts = np.arange(2 * self.steps + 1) * (0.5 * self.step)
        for t in ts:
            u = np.asarray(self.u_signal(t), dtype=float)
            if u.shape != (n_u,):
                raise ScenarioError(f"u(t) has shape {u.shape}, expected ({n_u},)")
            lo_bad = np.flatnonzero(~(self.u_lo < u))
            if lo_bad.size:
                raise ScenarioError(f"input violates the strict lower bound u_lo < u at t = {t:g}, "
                                    f"coordinate {lo_bad[0]}")
            hi_bad = np.flatnonzero(~(u < self.u_hi))
            if hi_bad.size:
                raise ScenarioError(f"input violates the strict upper bound u < u_hi at t = {t:g}, "
                                    f"coordinate {hi_bad[0]}")

    def to_dict(self) -> dict:
        return {"x0": self.x0.tolist(), "x0_lo": self.x0_lo.tolist(), "x0_hi": self.x0_hi.tolist(),
                "u": self.u_signal.to_dict(), "u_lo": self.u_lo.tolist(), "u_hi": self.u_hi.tolist(),
                "horizon": self.horizon, "step": self.step, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            return cls(d["x0"], d.get("x0_lo", d["x0"]), d.get("x0_hi", d["x0"]), input_from_dict(d["u"]),
                       d["u_lo"], d["u_hi"], float(d.get("horizon", 10.0)), float(d.get("step", 1e-3)),
                       int(d.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"scenario JSON is missing or has a malformed field: {exc}") from None


# --- trajectories -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    x_lo: Optional[np.ndarray] = None
    x_hi: Optional[np.ndarray] = None
    phi_lo: Optional[np.ndarray] = None
    phi_hi: Optional[np.ndarray] = None
    enclosure_ok: Optional[np.ndarray] = None
    order_ok: Optional[np.ndarray] = None
    enclosure_tol: float = 1e-8

    @property
    def has_bounds(self) -> bool:
        return self.x_lo is not None

    @property
    def e_lo(self) -> np.ndarray:
        return self.x - self.x_lo

    @property
    def e_hi(self) -> np.ndarray:
        return self.x_hi - self.x

    @property
    def width(self) -> np.ndarray:
        return self.x_hi - self.x_lo


def _rhs_parts(plant: PlantModel):
    A, Bp, Bu = plant.A, plant.B_phi, plant.B_u
    nl = plant.nonlin
    f = nl.f if nl is not None and nl.has_evaluators else None
    return A, Bp, Bu, f, (nl.f_lo, nl.f_hi) if f is not None else (None, None)


def _net_eval(net, x, n_out=0):
    # a missing network contributes phi = 0
    if net is None:
        return np.zeros(x.shape[:-1] + (n_out,))
    return net(x)


def simulate_closed_loop(plant: PlantModel, net: Optional[NeuralNet], scenario: Scenario,
                         zoh: bool = False) -> Trajectory:
    """Plant alone: ``x' = A x + B_phi phi(x) + B_u u(t) + f(x)``."""
    plant.check_network(net)
    scenario.validate(plant)
    A, Bp, Bu, f, _ = _rhs_parts(plant)
    held = {}

    def rhs(t, x):
        phi = held["phi"] if zoh else _net_eval(net, x, Bp.shape[1])
        dx = x @ A.T + phi @ Bp.T + np.asarray(scenario.u_signal(t)) @ Bu.T
        if f is not None:
            dx = dx + f(x)
        return dx

    def hold(k, t, x):
        held["phi"] = _net_eval(net, x, Bp.shape[1])

    xs = integrate(rhs, scenario.x0, scenario.step, scenario.steps, before_step=hold if zoh else None)
    ts = scenario.times
    us = np.array([scenario.u_signal(t) for t in ts]).reshape(ts.size, -1)
    return Trajectory(ts, xs, xs @ plant.C.T, us, _net_eval(net, xs, Bp.shape[1]))


def _observer_rhs(plant, net, pair, gains, u_signal, u_lo, u_hi, zoh, held):
    n = plant.n_x
    A, Bp, Bu, f, (f_lo, f_hi) = _rhs_parts(plant)
    C = plant.C
    E_lo = plant.A - gains.L_lo @ C
    E_hi = plant.A - gains.L_hi @ C
    c_lo = np.asarray(u_lo) @ Bu.T
    c_hi = np.asarray(u_hi) @ Bu.T

    def rhs(t, z):
        x, xl, xh = z[..., :n], z[..., n:2 * n], z[..., 2 * n:]
        if zoh:
            phi, phi_l, phi_h = held["phi"]
        else:
            phi, phi_l, phi_h = _phis(net, pair, x, xl, xh, Bp.shape[1])
        y = x @ C.T
        dx = x @ A.T + phi @ Bp.T + np.asarray(u_signal(t)) @ Bu.T
        dl = xl @ E_lo.T + y @ gains.L_lo.T + phi_l @ Bp.T + c_lo
        dh = xh @ E_hi.T + y @ gains.L_hi.T + phi_h @ Bp.T + c_hi
        if f is not None:
            dx = dx + f(x)
            dl = dl + f_lo(xl, xh)
            dh = dh + f_hi(xl, xh)
        return np.concatenate([dx, dl, dh], axis=-1)

    def hold(k, t, z):
        held["phi"] = _phis(net, pair, z[..., :n], z[..., n:2 * n], z[..., 2 * n:], Bp.shape[1])

    return rhs, hold


def _phis(net, pair, x, xl, xh, n_out=0):
    if net is None:
        e = np.zeros(x.shape[:-1] + (n_out,))
        return e, e, e
    lo, hi = aux_forward(pair, xl, xh, check=False)
    return net(x), lo.output, hi.output


def _spot_check_f(plant: PlantModel, scenario: Scenario, samples: int = 1000):
    nl = plant.nonlin
    if nl is None or not nl.has_evaluators:
        return
    rng = np.random.default_rng(scenario.seed)
    pad = np.maximum(1.0, scenario.x0_hi - scenario.x0_lo)
    xl, x, xh = sample_ordered_triples(scenario.x0_lo - pad, scenario.x0_hi + pad, samples, rng)
    v = np.maximum(nl.f_lo(xl, xh) - nl.f(x), nl.f(x) - nl.f_hi(xl, xh)).max()
    if v > 1e-9:
        warnings.warn(f"f_lo <= f <= f_hi fails on sampled boxes (max violation {v:.3e})", BoundWarning,
                      stacklevel=3)


def simulate_observer(plant: PlantModel, net: Optional[NeuralNet], pair: Optional[AuxNetPair],
                      gains: ObserverGains, scenario: Scenario, zoh: bool = False,
                      enclosure_tol: float = 1e-8) -> Trajectory:
    """Plant plus lower and upper observers on one RK4 grid."""
    plant.check_network(net)
    scenario.validate(plant)
    if net is not None and pair is None:
        pair = build_aux_pair(net)
    _spot_check_f(plant, scenario)
    n = plant.n_x
    held = {}
    rhs, hold = _observer_rhs(plant, net, pair, gains, scenario.u_signal, scenario.u_lo, scenario.u_hi,
                              zoh, held)
    z0 = np.concatenate([scenario.x0, scenario.x0_lo, scenario.x0_hi])
    zs = integrate(rhs, z0, scenario.step, scenario.steps, before_step=hold if zoh else None)
    x, xl, xh = zs[:, :n], zs[:, n:2 * n], zs[:, 2 * n:]
    ts = scenario.times
    us = np.array([scenario.u_signal(t) for t in ts]).reshape(ts.size, -1)
    phi, phi_l, phi_h = _phis(net, pair, x, xl, xh, plant.n_phi_out)
    encl = np.all((xl - enclosure_tol <= x) & (x <= xh + enclosure_tol), axis=1)
    order = np.all(xl <= xh + 1e-6, axis=1)
    return Trajectory(ts, x, x @ plant.C.T, us, phi, xl, xh, phi_l, phi_h, encl, order, enclosure_tol)


def simulate_error_bank(plant: PlantModel, net: Optional[NeuralNet], gains: ObserverGains,
                        x0, e0_lo, e0_hi, u_signal: Callable, u_lo, u_hi,
                        horizon: float = 10.0, step: float = 1e-3):
    """Batched runs from ``x_lo(0) = x0 - e0_lo``, ``x_hi(0) = x0 + e0_hi``.

    Returns ``(e_lo, e_hi)`` of shape ``(steps + 1, batch, n_x)``.
    """
    plant.check_network(net)
    pair = None if net is None else build_aux_pair(net)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    e0_lo = np.atleast_2d(np.asarray(e0_lo, dtype=float))
    e0_hi = np.atleast_2d(np.asarray(e0_hi, dtype=float))
    x0, e0_lo, e0_hi = np.broadcast_arrays(x0, e0_lo, e0_hi)
    n = plant.n_x
    rhs, _ = _observer_rhs(plant, net, pair, gains, u_signal, u_lo, u_hi, False, {})
    z0 = np.concatenate([x0, x0 - e0_lo, x0 + e0_hi], axis=-1)
    zs = integrate(rhs, z0, step, _steps(horizon, step))
    x, xl, xh = zs[..., :n], zs[..., n:2 * n], zs[..., 2 * n:]
    return x - xl, xh - x


# --- reports ------------------------------------------------------------------

@dataclass(frozen=True)
class EnclosureReport:
    passed: bool
    tol: float
    max_violation: float
    min_margin: float  # smallest of e_lo, e_hi over the run
    first_step: Optional[int] = None
    first_time: Optional[float] = None
    first_coord: Optional[int] = None
    order_ok: bool = True
    points: int = 0


def check_enclosure(traj: Trajectory, tol: float = 1e-8) -> EnclosureReport:
    if not traj.has_bounds:
        raise ValueError("trajectory carries no observer bounds")
    gap = np.minimum(traj.e_lo, traj.e_hi)
    bad = np.argwhere(gap < -tol)
    order_ok = bool(np.all(traj.x_lo <= traj.x_hi + 1e-6))
    if bad.size:
        k, i = (int(v) for v in bad[0])
        return EnclosureReport(False, tol, float((-gap).max()), float(gap.min()), k, float(traj.times[k]), i,
                               order_ok, traj.times.size)
    return EnclosureReport(True, tol, max(0.0, float((-gap).max())), float(gap.min()), order_ok=order_ok,
                           points=traj.times.size)


@dataclass(frozen=True)
class Metrics:
    sup_e_lo: np.ndarray
    sup_e_hi: np.ndarray
    terminal_width: np.ndarray
    max_width_first: np.ndarray
    max_width_second: np.ndarray
    bounded_per_coord: np.ndarray

    @property
    def bounded(self) -> bool:
        return bool(np.all(self.bounded_per_coord))


def error_metrics(traj: Trajectory, factor: float = 1.05) -> Metrics:
    """Sup errors, terminal widths and the ultimate-boundedness verdict.

    The verdict holds per coordinate when the largest width on ``[T/2, T]`` is
    at most ``factor`` times the largest width on ``[0, T/2]``.
    """
    if not traj.has_bounds:
        raise ValueError("trajectory carries no observer bounds")
    w = traj.width
    half = traj.times[-1] / 2.0
    first = traj.times <= half
    second = traj.times >= half
    m1 = w[first].max(axis=0)
    m2 = w[second].max(axis=0)
    ok = np.all(np.isfinite(w), axis=0) & (m2 <= factor * m1)
    return Metrics(np.abs(traj.e_lo).max(axis=0), np.abs(traj.e_hi).max(axis=0), w[-1], m1, m2, ok)


@dataclass(frozen=True, eq=False)
class LyapunovReport:
    eps: float
    c2: float
    c2_bound: float  # sup |du|^2 + 3 k2, the constant the decay bound allows
    residual: float  # max over interior points of Vdot + eps V - c2 (<= 0 when the fit holds)
    V: np.ndarray
    Vdot: np.ndarray

    @property
    def fits(self) -> bool:
        return math.isfinite(self.c2) and self.residual <= 1e-6


def lyapunov_trace(traj: Trajectory, gains: ObserverGains, k1: float = 0.0, k2: float = 0.0,
                   B_u: Optional[np.ndarray] = None, u_lo=None, u_hi=None) -> LyapunovReport:
    """Fit ``Vdot <= -eps V + c2`` for ``V = e~' Q e~`` along the trajectory.

    ``c2`` is first capped at ``sup |du|^2 + 3 k2`` with ``du = [u - u_lo; u_hi - u]``
    (the input and nonlinearity budget of the decay bound); the largest
    ``eps`` under that cap is found, then the smallest ``c2`` for that ``eps``.
    ``k1`` only enters the LMI and is accepted for symmetry of the call.
    When ``u_lo``/``u_hi`` are absent the bound is taken from the data alone.
    """
    e = np.concatenate([traj.e_lo, traj.e_hi], axis=1)
    Q = np.asarray(gains.Q_diag, dtype=float)
    V = (e * e) @ Q
    h = traj.times[1] - traj.times[0]
    Vdot = (V[2:] - V[:-2]) / (2.0 * h)
    Vi = V[1:-1]
    if u_lo is not None and u_hi is not None:
        du = np.concatenate([traj.u - np.asarray(u_lo), np.asarray(u_hi) - traj.u], axis=1)
        cap = float((du * du).sum(axis=1).max()) + 3.0 * k2
    else:
        cap = max(0.0, float(Vdot.max(initial=0.0))) + 3.0 * k2
    pos = Vi > 0.0
    if np.any(pos):
        eps = float(np.min((cap - Vdot[pos]) / Vi[pos]))
        eps = max(eps, 0.0)
    else:
        eps = math.inf if np.all(Vdot <= cap) else 0.0
    if math.isinf(eps):
        c2 = max(0.0, float(Vdot.max(initial=0.0)))
        return LyapunovReport(eps, c2, cap, float((Vdot - c2).max(initial=0.0)), V, Vdot)
    c2 = max(0.0, float((Vdot + eps * Vi).max(initial=0.0)))
    resid = float((Vdot + eps * Vi - c2).max(initial=0.0))
    return LyapunovReport(eps, c2, cap, resid, V, Vdot)


def export_csv(traj: Trajectory, path) -> Path:
    """One row per grid point, 17 significant digits."""
    n = traj.x.shape[1]
    cols = [traj.times[:, None], traj.x]
    head = ["t"] + [f"x{i + 1}" for i in range(n)]
    if traj.has_bounds:
        cols += [traj.x_lo, traj.x_hi]
        head += [f"xlo{i + 1}" for i in range(n)] + [f"xhi{i + 1}" for i in range(n)]
    cols.append(traj.y)
    head += [f"y{i + 1}" for i in range(traj.y.shape[1])]
    n_out = traj.phi.shape[1]
    names = ["phi"] if n_out == 1 else [f"phi{i + 1}" for i in range(n_out)]
    cols.append(traj.phi)
    head += names
    if traj.has_bounds:
        cols += [traj.phi_lo, traj.phi_hi]
        head += [s.replace("phi", "philo", 1) for s in names] + [s.replace("phi", "phihi", 1) for s in names]
        cols.append(traj.enclosure_ok[:, None].astype(float))
        head.append("enclosure_ok")
    data = np.hstack(cols)
    path = Path(path)
    fmt = ["%.17g"] * data.shape[1]
    if traj.has_bounds:
        fmt[-1] = "%d"
    np.savetxt(path, data, delimiter=",", header=",".join(head), comments="", fmt=fmt)
    return path
