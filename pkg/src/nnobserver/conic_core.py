"""Dense LMI feasibility with structured variables.

A problem asks for ``x`` with

    F(x) = F0 + sum_i x_i F_i  <=  -t I      (t > 0, the margin)
    G(x) = G0 + G @ x          >=  0         (entrywise)
    lo <= x <= hi

The solver maximizes ``t`` with a primal log-barrier path-following method on
the normalized problem (``F`` divided by its largest spectral norm, ``G`` rows
by their largest coefficient).  ``t`` is capped at 1 in normalized units, so
the reported margin is ``min(best margin, scale)``.  Linear constraints that
cannot be strictly satisfied are detected by LP and turned into equalities
before the barrier phase.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np
from scipy.linalg import null_space, solve_triangular
from scipy.optimize import linprog

__all__ = [
    "DiagPD",
    "BlockDense",
    "NonnegVector",
    "VarLayout",
    "LmiProblem",
    "LmiSolution",
    "Status",
    "LmiConstructionError",
    "solve_feasibility",
    "evaluate_constraints",
    "dump_problem",
]

DEFAULT_BOUND = 1e6


class LmiConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class DiagPD:
    """Diagonal of a positive definite diagonal matrix, each entry ``>= floor``."""

    n: int
    floor: float = 1e-3

    def __post_init__(self):
        if not self.floor > 0.0:
            raise LmiConstructionError("DiagPD floor must be strictly positive")

    @property
    def size(self) -> int:
        return self.n

    def bounds(self, big):
        return np.full(self.n, self.floor), np.full(self.n, big)


@dataclass(frozen=True)
class BlockDense:
    """``count`` free dense ``rows x cols`` blocks, stored row-major one after another."""

    rows: int
    cols: int
    count: int = 1

    @property
    def size(self) -> int:
        return self.rows * self.cols * self.count

    def bounds(self, big):
        return np.full(self.size, -big), np.full(self.size, big)


@dataclass(frozen=True)
class NonnegVector:
    n: int

    @property
    def size(self) -> int:
        return self.n

    def bounds(self, big):
        return np.zeros(self.n), np.full(self.n, big)


Block = Union[DiagPD, BlockDense, NonnegVector]


@dataclass(frozen=True)
class VarLayout:
    blocks: Tuple[Block, ...]
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"block{i}" for i in range(len(self.blocks))))
        if len(self.names) != len(self.blocks):
            raise LmiConstructionError("one name per variable block")

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def offsets(self):
        out, k = {}, 0
        for name, b in zip(self.names, self.blocks):
            out[name] = slice(k, k + b.size)
            k += b.size
        return out

    def bounds(self, big=DEFAULT_BOUND):
        if not self.blocks:
            return np.zeros(0), np.zeros(0)
        lo, hi = zip(*(b.bounds(big) for b in self.blocks))
        return np.concatenate(lo), np.concatenate(hi)

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return {name: x[s] for name, s in self.offsets().items()}


@dataclass(frozen=True, eq=False)
class LmiProblem:
    """``F`` has shape ``(d, m, m)``, ``G`` has shape ``(p, d)``."""

    layout: VarLayout
    F0: np.ndarray
    F: np.ndarray
    G0: np.ndarray = None
    G: np.ndarray = None
    lo: np.ndarray = None
    hi: np.ndarray = None

    def __post_init__(self):
        d = self.layout.size
        F0 = np.atleast_2d(np.asarray(self.F0, dtype=float))
        m = F0.shape[0]
        F = np.asarray(self.F, dtype=float).reshape(d, m, m) if d else np.zeros((0, m, m))
        if F0.shape != (m, m):
            raise LmiConstructionError(f"F0 must be square, got {F0.shape}")
        scale = max(1.0, float(np.abs(F0).max(initial=0.0)), float(np.abs(F).max(initial=0.0)))
        if np.abs(F0 - F0.T).max(initial=0.0) > 1e-14 * scale:
            raise LmiConstructionError("F0 is not symmetric")
        if F.size and np.abs(F - F.transpose(0, 2, 1)).max() > 1e-14 * scale:
            bad = int(np.argmax(np.abs(F - F.transpose(0, 2, 1)).reshape(d, -1).max(axis=1)))
            raise LmiConstructionError(f"coefficient matrix F[{bad}] is not symmetric")
        G0 = np.zeros(0) if self.G0 is None else np.atleast_1d(np.asarray(self.G0, dtype=float))
        G = np.zeros((G0.size, d)) if self.G is None else np.asarray(self.G, dtype=float).reshape(G0.size, d)
        lo_def, hi_def = self.layout.bounds()
        lo = lo_def if self.lo is None else np.asarray(self.lo, dtype=float)
        hi = hi_def if self.hi is None else np.asarray(self.hi, dtype=float)
        if lo.shape != (d,) or hi.shape != (d,) or np.any(lo >= hi):
            raise LmiConstructionError("box bounds must satisfy lo < hi with one pair per scalar")
        for name, val in (("F0", 0.5 * (F0 + F0.T)), ("F", 0.5 * (F + F.transpose(0, 2, 1))),
                          ("G0", G0), ("G", G), ("lo", lo), ("hi", hi)):
            val = np.array(val)
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def m(self) -> int:
        return self.F0.shape[0]

    @property
    def d(self) -> int:
        return self.layout.size

    def matrix(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.F0 + np.tensordot(x, self.F, axes=1)

    def elementwise(self, x) -> np.ndarray:
        return self.G0 + self.G @ np.asarray(x, dtype=float)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.F0, self.F, self.G0, self.G, self.lo, self.hi):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class Status(str, Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class LmiSolution:
    x: np.ndarray
    margin: float  # -max_eig at x, so F(x) <= -margin I
    max_eig: float
    min_elem: float
    iterations: int
    status: Status
    margin_upper_bound: float = np.inf
    seed: int = 0
    tol_psd: float = 1e-7
    tol_lin: float = 1e-10

    @property
    def feasible(self) -> bool:
        return self.status is Status.FEASIBLE


def evaluate_constraints(problem: LmiProblem, x) -> Tuple[float, float]:
    """Largest eigenvalue of ``F(x)`` and smallest entry of ``G(x)``, assembled term by term."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.d,):
        raise LmiConstructionError(f"x must have length {problem.d}")
    Fx = problem.F0.copy()
    for xi, Fi in zip(x, problem.F):
        if xi != 0.0:
            Fx += xi * Fi
    max_eig = float(np.linalg.eigvalsh(0.5 * (Fx + Fx.T))[-1]) if problem.m else -np.inf
    Gx = problem.G0 + problem.G @ x
    min_elem = float(Gx.min()) if Gx.size else np.inf
    return max_eig, min_elem


# --- linear phase ------------------------------------------------------------

def _normalize_rows(G0, G):
    scale = np.maximum(np.abs(G).max(axis=1, initial=0.0), np.abs(G0))
    scale[scale == 0.0] = 1.0
    return G0 / scale, G / scale[:, None]


def _interior_lp(G0, G, Aeq, beq, lo, hi):
    """Maximize the common slack ``s <= 1`` of ``G0 + G x >= s`` and the box."""
    p, d = G.shape
    width = np.minimum(hi - lo, 2.0)
    c = np.zeros(d + 1)
    c[-1] = -1.0
    A_ub = [np.hstack([-G, np.ones((p, 1))])]
    b_ub = [G0]
    # x - lo >= s * width / 4 and hi - x >= s * width / 4 keep the start off the box faces
    A_ub.append(np.hstack([-np.eye(d), 0.25 * width[:, None]]))
    b_ub.append(-lo)
    A_ub.append(np.hstack([np.eye(d), 0.25 * width[:, None]]))
    b_ub.append(hi)
    A_eq = np.hstack([Aeq, np.zeros((Aeq.shape[0], 1))]) if Aeq.size else None
    res = linprog(c, A_ub=np.vstack(A_ub), b_ub=np.concatenate(b_ub), A_eq=A_eq,
                  b_eq=beq if Aeq.size else None,
                  bounds=[(None, None)] * d + [(None, 1.0)], method="highs")
    if res.status != 0:
        return None, -np.inf
    return res.x[:d], float(res.x[-1])


def _row_max_lp(g0, g, G0, G, Aeq, beq, lo, hi):
    res = linprog(-g, A_ub=-G if G.size else None, b_ub=G0 if G.size else None,
                  A_eq=Aeq if Aeq.size else None, b_eq=beq if Aeq.size else None,
                  bounds=list(zip(lo, hi)), method="highs")
    if res.status == 3:
        return np.inf
    if res.status != 0:
        return -np.inf
    return g0 - res.fun


def _linear_phase(G0, G, lo, hi, eps=1e-9, start_radii=(10.0, 1e3)):
    """Strict interior point of the linear constraints, promoting implied equalities.

    Returns ``(x0, active_rows, eq_rows)`` or ``None`` when the linear part is
    infeasible.  The start is searched in small boxes first so the barrier
    phase does not begin at the far corners of the default bounds.
    """
    d = G.shape[1]
    rows = np.arange(G.shape[0])
    eq = []
    while True:
        ineq = np.setdiff1d(rows, eq)
        Aeq, beq = G[eq], -G0[eq]
        x0, s = _interior_lp(G0[ineq], G[ineq], Aeq, beq, lo, hi)
        if x0 is None or s < -eps:
            # a feasible point would give slack 0
            return None
        if s > eps:
            break
        promoted = False
        for k in ineq:
            others = np.setdiff1d(ineq, [k])
            best = _row_max_lp(G0[k], G[k], G0[others], G[others], Aeq, beq, lo, hi)
            if best < -eps:
                return None
            if best <= eps:
                eq.append(int(k))
                promoted = True
        if not promoted:
            # box faces are the binding ones; shrinking the box is not supported
            break
        eq.sort()
        if len(eq) > d:
            return None
    ineq = np.setdiff1d(rows, eq)
    Aeq, beq = G[eq], -G0[eq]
    for r in start_radii:
        lo_r = np.maximum(lo, np.minimum(-r, hi - 1.0))
        hi_r = np.minimum(hi, np.maximum(r, lo + 1.0))
        if np.any(lo_r >= hi_r):
            continue
        x_r, s_r = _interior_lp(G0[ineq], G[ineq], Aeq, beq, lo_r, hi_r)
        if x_r is not None and s_r > eps:
            x0 = x_r
            break
    return x0, ineq, np.asarray(eq, dtype=int)


# --- barrier phase -----------------------------------------------------------

class _Barrier:
    """Log barrier for ``S = -F(x) - t I``, ``g(x) > 0``, the box, and ``t < 1``."""

    def __init__(self, Fc, Fy, x0, Z, G0, G, lo, hi):
        # Fc = F(x0); Fy[j] = dF/dy_j for x = x0 + Z y
        self.Fc, self.Fy, self.x0, self.Z = Fc, Fy, x0, Z
        self.G0, self.G = G0, G
        self.lo, self.hi = lo, hi
        m = Fc.shape[0]
        self.m = m
        self.nu = m + G0.size + 2 * lo.size + 1

    def x_of(self, y):
        return self.x0 + self.Z @ y

    def value(self, y, t):
        """Barrier value, or +inf outside the domain."""
        if t >= 1.0:
            return np.inf
        S = -(self.Fc + np.tensordot(y, self.Fy, axes=1)) - t * np.eye(self.m)
        try:
            Lc = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return np.inf
        x = self.x_of(y)
        g = self.G0 + self.G @ x
        a, b = x - self.lo, self.hi - x
        if (g.size and g.min() <= 0.0) or a.min(initial=1.0) <= 0.0 or b.min(initial=1.0) <= 0.0:
            return np.inf
        return (-2.0 * np.log(np.diag(Lc)).sum() - np.log(g).sum()
                - np.log(a).sum() - np.log(b).sum() - np.log(1.0 - t))

    def derivatives(self, y, t):
        m = self.m
        S = -(self.Fc + np.tensordot(y, self.Fy, axes=1)) - t * np.eye(m)
        Lc = np.linalg.cholesky(S)
        Linv = solve_triangular(Lc, np.eye(m), lower=True)
        # directions dS/dz = -[Fy_1..Fy_k, I]; the barrier is -logdet S
        dirs = np.concatenate([self.Fy, np.eye(m)[None]], axis=0)
        B = Linv @ dirs @ Linv.T
        Bf = B.reshape(B.shape[0], -1)
        grad = np.trace(B, axis1=1, axis2=2).copy()
        H = Bf @ Bf.T
        x = self.x_of(y)
        k = y.size
        g = self.G0 + self.G @ x
        if g.size:
            Gy = self.G @ self.Z
            grad[:k] -= Gy.T @ (1.0 / g)
            H[:k, :k] += (Gy / g[:, None] ** 2).T @ Gy
        a, b = x - self.lo, self.hi - x
        inv = 1.0 / a ** 2 + 1.0 / b ** 2
        grad[:k] += self.Z.T @ (-1.0 / a + 1.0 / b)
        H[:k, :k] += (self.Z * inv[:, None]).T @ self.Z
        grad[k] += 1.0 / (1.0 - t)
        H[k, k] += 1.0 / (1.0 - t) ** 2
        return grad, H


def _center(bar, y, t, tau, budget):
    """Newton centering of ``-tau t + barrier``; returns (y, t, iterations, converged)."""
    k = y.size
    iters = 0
    f = -tau * t + bar.value(y, t)
    while iters < budget:
        grad, H = bar.derivatives(y, t)
        grad[k] -= tau
        H = 0.5 * (H + H.T)
        reg = 1e-14 * max(1.0, np.trace(H) / H.shape[0])
        try:
            step = -np.linalg.solve(H + reg * np.eye(H.shape[0]), grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, grad, rcond=None)[0]
        dec = float(-grad @ step)
        iters += 1
        if dec / 2.0 <= 1e-10:
            return y, t, iters, True
        s = 1.0
        while True:
            y_new, t_new = y + s * step[:k], t + s * step[k]
            f_new = -tau * t_new + bar.value(y_new, t_new)
            if f_new <= f - 0.25 * s * dec:
                break
            s *= 0.5
            if s < 1e-14:
                return y, t, iters, True
        y, t, f = y_new, t_new, f_new
    return y, t, iters, False


def solve_feasibility(problem: LmiProblem, tol_psd: float = 1e-7, tol_lin: float = 1e-10,
                      max_iter: int = 500, seed: int = 0, gap: float = 1e-9) -> LmiSolution:
    """Maximize the margin ``t`` of ``F(x) <= -t I`` under the linear constraints.

    ``status`` is FEASIBLE iff the returned point has ``max_eig <= -tol_psd`` and
    ``min_elem >= -tol_lin`` (re-checked by :func:`evaluate_constraints`);
    INFEASIBLE when the barrier bound shows no margin ``>= tol_psd`` exists (or
    the linear constraints are empty); INDETERMINATE when ``max_iter`` Newton
    steps run out first.
    """
    d, m = problem.d, problem.m
    rng = np.random.default_rng(seed)

    scale_F = max(float(np.linalg.norm(problem.F0, 2)) if m else 0.0,
                  max((float(np.linalg.norm(Fi, 2)) for Fi in problem.F), default=0.0))
    if scale_F == 0.0:
        scale_F = 1.0
    F0n, Fn = problem.F0 / scale_F, problem.F / scale_F

    G0, G = problem.G0, problem.G
    const = np.all(G == 0.0, axis=1) if G.size else np.zeros(G0.size, bool)
    if np.any(G0[const] < -tol_lin):
        return _finish(problem, np.clip(np.zeros(d), problem.lo, problem.hi), 0, Status.INFEASIBLE,
                       -np.inf, seed, tol_psd, tol_lin)
    G0n, Gn = _normalize_rows(G0[~const], G[~const])

    lin = _linear_phase(G0n, Gn, problem.lo, problem.hi)
    if lin is None:
        return _finish(problem, np.clip(np.zeros(d), problem.lo, problem.hi), 0, Status.INFEASIBLE,
                       -np.inf, seed, tol_psd, tol_lin)
    x0, ineq, eq = lin
    Z = null_space(Gn[eq]) if eq.size else np.eye(d)
    G0b, Gb = G0n[ineq], Gn[ineq]

    # seeded nudge of the start inside its slack, within the equality subspace
    if Z.shape[1]:
        slack = min(np.min(G0b + Gb @ x0, initial=1.0), np.min(x0 - problem.lo, initial=1.0),
                    np.min(problem.hi - x0, initial=1.0))
        dirn = Z @ rng.standard_normal(Z.shape[1])
        row_gain = np.abs(Gb @ dirn).max(initial=0.0) + np.abs(dirn).max(initial=0.0)
        if row_gain > 0.0 and slack > 0.0:
            x0 = x0 + 0.1 * slack * dirn / row_gain

    Fy = np.tensordot(Z.T, Fn, axes=1)  # (k, m, m)
    bar = _Barrier(F0n + np.tensordot(x0, Fn, axes=1), Fy, x0, Z, G0b, Gb, problem.lo, problem.hi)

    y = np.zeros(Z.shape[1])
    lam_max = float(np.linalg.eigvalsh(bar.Fc)[-1]) if m else -1.0
    t = min(-lam_max - 1.0, 0.5)

    iters, tau = 0, 1.0
    status = Status.INDETERMINATE
    upper = np.inf
    while iters < max_iter:
        y, t, used, converged = _center(bar, y, t, tau, max_iter - iters)
        iters += used
        if not converged:
            break
        upper = t + bar.nu / tau
        if upper * scale_F < tol_psd:
            status = Status.INFEASIBLE
            break
        if bar.nu / tau < gap:
            status = None  # resolved by the final check
            break
        tau *= 10.0
    x = bar.x_of(y)
    return _finish(problem, x, iters, status, upper * scale_F, seed, tol_psd, tol_lin)


def _finish(problem, x, iters, status, upper, seed, tol_psd, tol_lin):
    max_eig, min_elem = evaluate_constraints(problem, x)
    ok = max_eig <= -tol_psd and min_elem >= -tol_lin
    if ok:
        status = Status.FEASIBLE
    elif status is None:
        status = Status.INFEASIBLE
    elif status is Status.FEASIBLE:
        status = Status.INDETERMINATE
    return LmiSolution(np.asarray(x, dtype=float), -max_eig, max_eig, min_elem, iters, status,
                       upper, seed, tol_psd, tol_lin)


def dump_problem(problem: LmiProblem) -> dict:
    """Dense row-major dump for cross-checking with an external solver."""
    return {
        "layout": [{"name": n, "kind": type(b).__name__, **b.__dict__}
                   for n, b in zip(problem.layout.names, problem.layout.blocks)],
        "m": problem.m,
        "d": problem.d,
        "F0": problem.F0.tolist(),
        "F": problem.F.tolist(),
        "G0": problem.G0.tolist(),
        "G": problem.G.tolist(),
        "lo": problem.lo.tolist(),
        "hi": problem.hi.tolist(),
        "constraint": "F0 + sum_i x_i F_i <= -t I, G0 + G x >= 0, lo <= x <= hi",
    }
