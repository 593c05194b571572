"""Interval-observer gain synthesis and certificate checking.

The error system of the observer pair is driven by ``E = A~ - L~ C~`` where the
tilde matrices are two block-diagonal copies (lower and upper observer).  Gains
come from one LMI in the diagonal ``Q``, the block-diagonal ``M = Q L~`` and
the sector multipliers ``lambda``; positivity of the error system is the
Metzler condition on the off-diagonal entries of ``Q A~ - M C~``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .conic_core import (
    DEFAULT_BOUND,
    BlockDense,
    DiagPD,
    LmiProblem,
    LmiSolution,
    NonnegVector,
    Status,
    VarLayout,
    solve_feasibility,
)
from .nnet import (
    AuxNetPair,
    BracketReport,
    NeuralNet,
    build_aux_pair,
    check_bracketing,
    network_to_dict,
)
from .sector_qc import NBlocks, SectorBound, build_N, build_qc_matrices, global_sector

__all__ = [
    "PlantError",
    "SynthesisInfeasible",
    "CertificateError",
    "PlantModel",
    "LipschitzBounds",
    "LiftedMatrices",
    "SynthOptions",
    "ObserverGains",
    "CertificateReport",
    "lift_system",
    "compute_k1",
    "compute_k2",
    "assemble_lmi",
    "lmi_matrix",
    "schur_matrix",
    "synthesize",
    "verify_certificate",
    "is_metzler",
    "input_hash",
    "plant_to_dict",
    "plant_from_dict",
    "load_plant",
    "save_plant",
    "gains_to_dict",
    "gains_from_dict",
    "load_certificate",
    "save_certificate",
]

METZLER_TOL = 1e-12


class PlantError(ValueError):
    pass


class SynthesisInfeasible(RuntimeError):
    """The LMI solver did not certify feasibility; carries the solver record."""

    def __init__(self, solution: LmiSolution):
        self.solution = solution
        self.status = solution.status
        self.margin = solution.margin
        super().__init__(
            f"observer LMI {solution.status.value}: best margin {solution.margin:.3e} "
            f"(upper bound {solution.margin_upper_bound:.3e}, tol {solution.tol_psd:g})")


class CertificateError(RuntimeError):
    pass


# --- plant -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LipschitzBounds:
    """Bounding data for the Lipschitz nonlinearity ``f``.

    ``f_lo(x_lo, x_hi) <= f(x) <= f_hi(x_lo, x_hi)`` on ordered boxes, with
    ``|f(x) - f_lo| <= a1_lo |x - x_lo| + a2_lo |x_hi - x| + rho_lo`` and the
    mirrored bound for the upper side.
    """

    beta_lip: float = 0.0
    a1_lo: float = 0.0
    a2_lo: float = 0.0
    a1_hi: float = 0.0
    a2_hi: float = 0.0
    rho_lo: Optional[np.ndarray] = None
    rho_hi: Optional[np.ndarray] = None
    f: Optional[Callable] = None
    f_lo: Optional[Callable] = None
    f_hi: Optional[Callable] = None

    def __post_init__(self):
        for name in ("beta_lip", "a1_lo", "a2_lo", "a1_hi", "a2_hi"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0.0:
                raise PlantError(f"LipschitzBounds.{name} must be a finite number >= 0")
            object.__setattr__(self, name, v)
        for name in ("rho_lo", "rho_hi"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.atleast_1d(np.asarray(v, dtype=float))
            if np.any(v < 0.0) or not np.all(np.isfinite(v)):
                raise PlantError(f"LipschitzBounds.{name} must be finite and >= 0 entrywise")
            object.__setattr__(self, name, v)
        given = [c is not None for c in (self.f, self.f_lo, self.f_hi)]
        if any(given) and not all(given):
            raise PlantError("f, f_lo and f_hi must be supplied together")

    @property
    def has_evaluators(self) -> bool:
        return self.f is not None


@dataclass(frozen=True, eq=False)
class PlantModel:
    A: np.ndarray
    B_phi: np.ndarray
    B_u: np.ndarray
    C: np.ndarray
    nonlin: Optional[LipschitzBounds] = None
    state_labels: Optional[Sequence[str]] = None
    output_labels: Optional[Sequence[str]] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise PlantError(f"A must be square, got shape {A.shape}")
        B_phi = np.asarray(self.B_phi, dtype=float).reshape(n, -1) if np.size(self.B_phi) else np.zeros((n, 0))
        B_u = np.asarray(self.B_u, dtype=float).reshape(n, -1) if np.size(self.B_u) else np.zeros((n, 0))
        C = np.asarray(self.C, dtype=float)
        C = C.reshape(-1, n) if C.size else np.zeros((0, n))
        for name, M in (("A", A), ("B_phi", B_phi), ("B_u", B_u), ("C", C)):
            if not np.all(np.isfinite(M)):
                raise PlantError(f"{name} contains NaN or Inf")
        for name, M in (("B_phi", B_phi), ("B_u", B_u)):
            if np.any(M < 0.0):
                i, j = np.argwhere(M < 0.0)[0]
                raise PlantError(
                    f"{name}[{i},{j}] = {M[i, j]:g} is negative: the plant model requires B_phi and B_u "
                    f"to lie in the nonnegative orthant (entrywise >= 0)")
        if self.nonlin is not None:
            for name in ("rho_lo", "rho_hi"):
                r = getattr(self.nonlin, name)
                if r is not None and r.shape != (n,):
                    raise PlantError(f"nonlin.{name} must have length n_x = {n}")
        for name, labels, size in (("state_labels", self.state_labels, n),
                                   ("output_labels", self.output_labels, C.shape[0])):
            if labels is not None and len(labels) != size:
                raise PlantError(f"{name} must have {size} entries")
        for name, M in (("A", A), ("B_phi", B_phi), ("B_u", B_u), ("C", C)):
            M = M.copy()
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_u(self) -> int:
        return self.B_u.shape[1]

    @property
    def n_phi_out(self) -> int:
        return self.B_phi.shape[1]

    def check_network(self, net: Optional[NeuralNet]) -> None:
        if net is None:
            if self.n_phi_out and np.any(self.B_phi != 0.0):
                raise PlantError("B_phi is nonzero but no network was supplied")
            return
        if net.n_in != self.n_x:
            raise PlantError(f"network input width {net.n_in} differs from n_x = {self.n_x}")
        if net.n_out != self.n_phi_out:
            raise PlantError(f"network output width {net.n_out} differs from B_phi columns {self.n_phi_out}")


def plant_to_dict(plant: PlantModel) -> dict:
    d = {"A": plant.A.tolist(), "B_phi": plant.B_phi.tolist(), "B_u": plant.B_u.tolist(),
         "C": plant.C.tolist()}
    if plant.state_labels is not None:
        d["state_labels"] = list(plant.state_labels)
    if plant.output_labels is not None:
        d["output_labels"] = list(plant.output_labels)
    nl = plant.nonlin
    if nl is not None:
        d["lipschitz"] = {k: getattr(nl, k) for k in ("beta_lip", "a1_lo", "a2_lo", "a1_hi", "a2_hi")}
        for k in ("rho_lo", "rho_hi"):
            if getattr(nl, k) is not None:
                d["lipschitz"][k] = getattr(nl, k).tolist()
    return d


def _matrix_field(d, key, required=True):
    if key not in d:
        if required:
            raise PlantError(f"plant JSON is missing field '{key}'")
        return np.zeros(0)
    try:
        a = np.array(d[key], dtype=float)
    except (TypeError, ValueError):
        raise PlantError(f"plant field '{key}' is not a numeric array") from None
    if not np.all(np.isfinite(a)):
        raise PlantError(f"plant field '{key}' contains NaN or Inf")
    return a


def plant_from_dict(d: dict) -> PlantModel:
    if not isinstance(d, dict):
        raise PlantError("plant JSON must be an object")
    A = _matrix_field(d, "A")
    n = A.shape[0] if A.ndim == 2 else -1
    if A.ndim != 2 or A.shape != (n, n):
        raise PlantError("plant field 'A' must be a square 2D array")
    C = _matrix_field(d, "C")
    if C.size and (C.ndim != 2 or C.shape[1] != n):
        raise PlantError(f"plant field 'C' must be a 2D array with {n} columns")
    mats = {}
    for key in ("B_phi", "B_u"):
        M = _matrix_field(d, key, required=False)
        if M.size and M.ndim == 1 and M.shape[0] == n:
            M = M[:, None]
        if M.size and (M.ndim != 2 or M.shape[0] != n):
            raise PlantError(f"plant field '{key}' must be a 2D array with {n} rows")
        mats[key] = M
    nonlin = None
    if "lipschitz" in d:
        lip = d["lipschitz"]
        if not isinstance(lip, dict):
            raise PlantError("plant field 'lipschitz' must be an object")
        nonlin = LipschitzBounds(**{k: v for k, v in lip.items()
                                    if k in ("beta_lip", "a1_lo", "a2_lo", "a1_hi", "a2_hi", "rho_lo", "rho_hi")})
    return PlantModel(A, mats["B_phi"], mats["B_u"], C, nonlin,
                      d.get("state_labels"), d.get("output_labels"))


def load_plant(path) -> PlantModel:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PlantError(f"plant file is not valid JSON: {exc}") from None
    return plant_from_dict(data)


def save_plant(plant: PlantModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(plant_to_dict(plant), indent=1))
    return path


def input_hash(plant: PlantModel, net: Optional[NeuralNet]) -> str:
    """sha256 of the canonical JSON of plant and network."""
    payload = {"plant": plant_to_dict(plant), "net": None if net is None else network_to_dict(net)}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# --- lifted system and constants --------------------------------------------

@dataclass(frozen=True, eq=False)
class LiftedMatrices:
    A: np.ndarray
    B_phi: np.ndarray
    B_u: np.ndarray
    C: np.ndarray


def _blkdiag2(M):
    r, c = M.shape
    out = np.zeros((2 * r, 2 * c))
    out[:r, :c] = M
    out[r:, c:] = M
    return out


def lift_system(plant: PlantModel) -> LiftedMatrices:
    return LiftedMatrices(*(_blkdiag2(M) for M in (plant.A, plant.B_phi, plant.B_u, plant.C)))


def compute_k1(bounds: Optional[LipschitzBounds]) -> float:
    if bounds is None:
        return 0.0
    return 3.0 * max(bounds.a1_lo ** 2 + bounds.a1_hi ** 2, bounds.a2_lo ** 2 + bounds.a2_hi ** 2)


def compute_k2(bounds: Optional[LipschitzBounds]) -> float:
    """``|rho_lo|^2 + |rho_hi|^2``; the constant the Lyapunov bound adds as ``3 k2``."""
    if bounds is None:
        return 0.0
    return float(sum(np.dot(r, r) for r in (bounds.rho_lo, bounds.rho_hi) if r is not None))


# --- LMI assembly -------------------------------------------------------------

@dataclass(frozen=True)
class SynthOptions:
    eps_Q: float = 1e-3
    tol_psd: float = 1e-7
    tol_lin: float = 1e-10
    max_iter: int = 500
    seed: int = 0
    # lower bound -max_rate on the diagonal of A - L C; keeps gains at
    # integrator-friendly sizes. None disables it.
    max_rate: Optional[float] = 100.0
    bound: float = DEFAULT_BOUND
    bracket_box: Optional[tuple] = None
    bracket_samples: int = 10_000


def _net_blocks(net: Optional[NeuralNet], n_x: int):
    if net is None:
        z = np.zeros
        return NBlocks(z((0, 2 * n_x)), z((0, 0)), z((0, 2 * n_x)), z((0, 0)), 0), None
    pair = build_aux_pair(net)
    return build_N(pair), pair


class _Index:
    """Row/column slices of the five blocks of the observer LMI."""

    def __init__(self, n_x, n_phi, n_out, n_u):
        sizes = [2 * n_x, 2 * n_phi, 2 * n_out, 2 * n_u, 2 * n_x]
        edges = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.e, self.w, self.p, self.u, self.q = (slice(a, b) for a, b in zip(edges[:-1], edges[1:]))
        self.m = int(edges[-1])


def _constant_part(N: NBlocks, k1, idx: _Index):
    F0 = np.zeros((idx.m, idx.m))
    F0[idx.e, idx.e] = k1 * np.eye(idx.e.stop - idx.e.start) + N.N_phi_x.T @ N.N_phi_x
    G2 = N.N_phi_x.T @ N.N_phi_w
    F0[idx.e, idx.w] = G2
    F0[idx.w, idx.e] = G2.T
    F0[idx.w, idx.w] = N.N_phi_w.T @ N.N_phi_w
    for s in (idx.p, idx.u, idx.q):
        F0[s, s] = -np.eye(s.stop - s.start)
    return F0


def _qc_blocks(N: NBlocks, qc):
    """Sector contributions to Gamma_1, Gamma_2, Gamma_3 for given QC matrices."""
    Nvx, Nvw = N.N_v_x, N.N_v_w
    g1 = Nvx.T @ qc.F_ab @ Nvx
    g2 = Nvx.T @ qc.F_ab @ Nvw + Nvx.T @ qc.F_apb
    g3 = Nvw.T @ qc.F_ab @ Nvw + qc.F_apb @ Nvw + Nvw.T @ qc.F_apb + qc.F_l
    return g1, g2, g3


def assemble_lmi(plant: PlantModel, net: Optional[NeuralNet], pair: Optional[AuxNetPair],
                 sector: Optional[SectorBound], k1: float,
                 opts: SynthOptions = SynthOptions()) -> LmiProblem:
    """Affine LMI in ``x = [diag Q (2n_x), M_1, M_2 (row-major n_x*n_y each), lambda (n_phi)]``.

    Matrix blocks, in order: error (2n_x), hidden activations (2n_phi),
    network outputs (2n_out), inputs (2n_u), the ``Q`` block (2n_x).
    Linear rows: within-block off-diagonals of ``Q A~ - M C~`` (>= 0), plus
    ``(Q A~ - M C~)_ii + max_rate Q_ii >= 0`` when a rate bound is set.
    """
    plant.check_network(net)
    if net is not None and pair is None:
        pair = build_aux_pair(net)
    if net is not None and pair.parent is not net:
        raise PlantError("auxiliary pair was built for a different network")
    if net is not None and sector is None:
        sector = global_sector(net.activation)
    if sector is not None and sector.beta < sector.alpha:
        raise PlantError("sector must satisfy alpha <= beta")
    if not np.isfinite(k1) or k1 < 0.0:
        raise PlantError("k1 must be finite and >= 0")

    n_x, n_y, n_u = plant.n_x, plant.n_y, plant.n_u
    N = build_N(pair) if net is not None else _net_blocks(None, n_x)[0]
    n_phi, n_out = N.n_phi, plant.n_phi_out if net is not None else 0
    idx = _Index(n_x, n_phi, n_out, n_u)
    lift = lift_system(plant)
    B_phi = lift.B_phi if net is not None else np.zeros((2 * n_x, 0))

    layout = VarLayout((DiagPD(2 * n_x, opts.eps_Q), BlockDense(n_x, n_y, 2), NonnegVector(n_phi)),
                       ("Q", "M", "lambda"))
    d = layout.size
    F = np.zeros((d, idx.m, idx.m))
    F0 = _constant_part(N, k1, idx)

    col = 0
    for i in range(2 * n_x):
        Fi = F[col]
        ei = np.zeros((2 * n_x, 1))
        ei[i] = 1.0
        QA = ei @ (ei.T @ lift.A)
        Fi[idx.e, idx.e] = QA + QA.T
        for s, B in ((idx.p, B_phi), (idx.u, lift.B_u), (idx.q, np.eye(2 * n_x))):
            blk = ei @ (ei.T @ B)
            Fi[idx.e, s] = blk
            Fi[s, idx.e] = blk.T
        col += 1
    for k in range(2):
        for r in range(n_x):
            for c in range(n_y):
                Em = np.zeros((2 * n_x, 2 * n_y))
                Em[k * n_x + r, k * n_y + c] = 1.0
                MC = Em @ lift.C
                F[col][idx.e, idx.e] = -(MC + MC.T)
                col += 1
    for j in range(n_phi):
        lam = np.zeros(n_phi)
        lam[j] = 1.0
        g1, g2, g3 = _qc_blocks(N, build_qc_matrices(sector, lam, verify=False))
        Fj = F[col]
        Fj[idx.e, idx.e] = g1
        Fj[idx.e, idx.w] = g2
        Fj[idx.w, idx.e] = g2.T
        Fj[idx.w, idx.w] = g3
        col += 1

    G_rows = _metzler_rows(plant, lift, d, opts.max_rate)
    return LmiProblem(layout, F0, F, np.zeros(G_rows.shape[0]), G_rows)


def _metzler_rows(plant, lift, d, max_rate):
    """Coefficient rows of ``X = Q A~ - M C~`` entries (zero constant term)."""
    n_x, n_y = plant.n_x, plant.n_y
    rows = []
    for k in range(2):
        for i in range(n_x):
            for j in range(n_x):
                if i == j and max_rate is None:
                    continue
                g = np.zeros(d)
                ii = k * n_x + i
                # X[ii, jj] = Q_ii A~[ii, jj] - sum_c M[ii, k n_y + c] C[c, j]
                g[ii] = lift.A[ii, k * n_x + j]
                base = 2 * n_x + k * n_x * n_y + i * n_y
                g[base:base + n_y] = -plant.C[:, j]
                if i == j:
                    g[ii] += max_rate
                rows.append(g)
    return np.array(rows).reshape(-1, d)


def _unpack(x, plant, n_phi):
    n_x, n_y = plant.n_x, plant.n_y
    q = x[:2 * n_x]
    m = x[2 * n_x:2 * n_x + 2 * n_x * n_y].reshape(2, n_x, n_y)
    lam = x[2 * n_x + 2 * n_x * n_y:]
    assert lam.size == n_phi
    return q, m, lam


def lmi_matrix(plant: PlantModel, net: Optional[NeuralNet], Q_diag, M, lam, k1: float,
               sector: Optional[SectorBound] = None) -> np.ndarray:
    """Direct block assembly of the observer LMI at a point (independent of :func:`assemble_lmi`).

    ``M`` is the full ``2n_x x 2n_y`` matrix.
    """
    n_x = plant.n_x
    lift = lift_system(plant)
    Q = np.diag(np.asarray(Q_diag, dtype=float))
    X = Q @ lift.A - M @ lift.C
    if net is None:
        n_phi, n_out = 0, 0
        Nvx = np.zeros((0, 2 * n_x))
        Npx = np.zeros((0, 2 * n_x))
        Npw = Nvw = np.zeros((0, 0))
        F_ab = F_apb = F_l = np.zeros((0, 0))
        QBp = np.zeros((2 * n_x, 0))
    else:
        N = build_N(build_aux_pair(net))
        sector = sector or global_sector(net.activation)
        a, b = sector.alpha, sector.beta
        Lam = np.diag(np.asarray(lam, dtype=float))
        Z = np.zeros_like(Lam)
        D = np.block([[Lam, Z], [Z, Lam]])
        F_ab, F_apb, F_l = -2.0 * a * b * D, (a + b) * D, -2.0 * D
        Nvx, Nvw, Npx, Npw = N.N_v_x, N.N_v_w, N.N_phi_x, N.N_phi_w
        n_phi, n_out = N.n_phi, net.n_out
        QBp = Q @ lift.B_phi
    G1 = X + X.T + k1 * np.eye(2 * n_x) + Npx.T @ Npx + Nvx.T @ F_ab @ Nvx
    G2 = Npx.T @ Npw + Nvx.T @ F_ab @ Nvw + Nvx.T @ F_apb
    G3 = Npw.T @ Npw + Nvw.T @ F_ab @ Nvw + F_apb @ Nvw + Nvw.T @ F_apb + F_l
    QBu = Q @ lift.B_u
    n_u = plant.n_u
    z = np.zeros
    rows = [
        [G1, G2, QBp, QBu, Q],
        [G2.T, G3, z((2 * n_phi, 2 * n_out)), z((2 * n_phi, 2 * n_u)), z((2 * n_phi, 2 * n_x))],
        [QBp.T, z((2 * n_out, 2 * n_phi)), -np.eye(2 * n_out), z((2 * n_out, 2 * n_u)), z((2 * n_out, 2 * n_x))],
        [QBu.T, z((2 * n_u, 2 * n_phi)), z((2 * n_u, 2 * n_out)), -np.eye(2 * n_u), z((2 * n_u, 2 * n_x))],
        [Q, z((2 * n_x, 2 * n_phi)), z((2 * n_x, 2 * n_out)), z((2 * n_x, 2 * n_u)), -np.eye(2 * n_x)],
    ]
    return np.block(rows)


def schur_matrix(plant: PlantModel, net: Optional[NeuralNet], Q_diag, L_tilde, lam, k1: float,
                 sector: Optional[SectorBound] = None) -> np.ndarray:
    """Reduced two-block form with the ``-I`` blocks eliminated, written in ``E = A~ - L~ C~``."""
    n_x = plant.n_x
    lift = lift_system(plant)
    Q = np.diag(np.asarray(Q_diag, dtype=float))
    E = lift.A - L_tilde @ lift.C
    if net is None:
        Bp = np.zeros((2 * n_x, 0))
        G5_net = np.zeros((2 * n_x, 2 * n_x))
        G2 = np.zeros((2 * n_x, 0))
        G3 = np.zeros((0, 0))
    else:
        N = build_N(build_aux_pair(net))
        sector = sector or global_sector(net.activation)
        qc = build_qc_matrices(sector, lam)
        g1, g2, g3 = _qc_blocks(N, qc)
        Bp = lift.B_phi
        G5_net = N.N_phi_x.T @ N.N_phi_x + g1
        G2 = N.N_phi_x.T @ N.N_phi_w + g2
        G3 = N.N_phi_w.T @ N.N_phi_w + g3
    G5 = (Q @ E + E.T @ Q + k1 * np.eye(2 * n_x) + Q @ Bp @ Bp.T @ Q
          + Q @ lift.B_u @ lift.B_u.T @ Q + Q @ Q + G5_net)
    return np.block([[G5, G2], [G2.T, G3]])


def is_metzler(Mx, tol: float = METZLER_TOL) -> bool:
    Mx = np.asarray(Mx, dtype=float)
    if Mx.ndim != 2 or Mx.shape[0] != Mx.shape[1]:
        raise ValueError(f"is_metzler needs a square matrix, got shape {Mx.shape}")
    off = Mx[~np.eye(Mx.shape[0], dtype=bool)]
    return bool(np.all(off >= -tol))


def _min_offdiag(Mx) -> float:
    off = np.asarray(Mx)[~np.eye(Mx.shape[0], dtype=bool)]
    return float(off.min()) if off.size else np.inf


# --- gains and certificates -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ObserverGains:
    L_lo: np.ndarray
    L_hi: np.ndarray
    Q_diag: np.ndarray
    lam: np.ndarray
    margin_psd: float
    k1: float
    problem_hash: str = ""
    solver_seed: int = 0
    tol_psd: float = 1e-7
    tol_lin: float = 1e-10
    sector: Optional[SectorBound] = None
    k2: float = 0.0
    eps_Q: float = 1e-3
    max_rate: Optional[float] = None

    @property
    def L_tilde(self) -> np.ndarray:
        n_x, n_y = self.L_lo.shape
        out = np.zeros((2 * n_x, 2 * n_y))
        out[:n_x, :n_y] = self.L_lo
        out[n_x:, n_y:] = self.L_hi
        return out

    @property
    def M(self) -> np.ndarray:
        return self.Q_diag[:, None] * self.L_tilde


def _float_list(a):
    return [float(v) for v in np.ravel(a)]


def gains_to_dict(g: ObserverGains) -> dict:
    return {
        "L_lo": np.asarray(g.L_lo).tolist(),
        "L_hi": np.asarray(g.L_hi).tolist(),
        "Q_diag": _float_list(g.Q_diag),
        "lambda": _float_list(g.lam),
        "margin_psd": float(g.margin_psd),
        "k1": float(g.k1),
        "k2": float(g.k2),
        "problem_hash": g.problem_hash,
        "tolerances": {"psd": g.tol_psd, "lin": g.tol_lin, "metzler": METZLER_TOL},
        "solver_seed": int(g.solver_seed),
        "sector": None if g.sector is None else [g.sector.alpha, g.sector.beta],
        "eps_Q": g.eps_Q,
        "max_rate": g.max_rate,
    }


def gains_from_dict(d: dict) -> ObserverGains:
    try:
        L_lo = np.array(d["L_lo"], dtype=float)
        L_hi = np.array(d["L_hi"], dtype=float)
        Q_diag = np.array(d["Q_diag"], dtype=float)
        lam = np.array(d.get("lambda", []), dtype=float)
        margin = float(d["margin_psd"])
        k1 = float(d["k1"])
    except (KeyError, TypeError, ValueError) as exc:
        raise PlantError(f"certificate JSON is missing or has a malformed field: {exc}") from None
    for name, a in (("L_lo", L_lo), ("L_hi", L_hi), ("Q_diag", Q_diag), ("lambda", lam)):
        if not np.all(np.isfinite(a)):
            raise PlantError(f"certificate field '{name}' contains NaN or Inf")
    if L_lo.ndim != 2 or L_lo.shape != L_hi.shape or Q_diag.shape != (2 * L_lo.shape[0],):
        raise PlantError("certificate gains have inconsistent shapes")
    tol = d.get("tolerances", {})
    sec = d.get("sector")
    return ObserverGains(L_lo, L_hi, Q_diag, lam, margin, k1, d.get("problem_hash", ""),
                         int(d.get("solver_seed", 0)), float(tol.get("psd", 1e-7)),
                         float(tol.get("lin", 1e-10)),
                         None if sec is None else SectorBound(float(sec[0]), float(sec[1])),
                         float(d.get("k2", 0.0)), float(d.get("eps_Q", 1e-3)), d.get("max_rate"))


def save_certificate(g: ObserverGains, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(gains_to_dict(g), indent=1))
    return path


def load_certificate(path) -> ObserverGains:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PlantError(f"certificate file is not valid JSON: {exc}") from None
    return gains_from_dict(data)


@dataclass(frozen=True)
class CertificateReport:
    lmi_max_eig: float
    lmi_ok: bool
    metzler_lo_min: float
    metzler_hi_min: float
    metzler_ok: bool
    positivity_min: float  # smallest off-diagonal of Q A~ - M C~
    positivity_ok: bool
    schur_max_eig: float
    schur_ok: bool
    q_min: float
    lambda_min: float
    multipliers_ok: bool
    bracketing: Optional[BracketReport]
    hash_ok: Optional[bool] = None
    notes: tuple = ()

    @property
    def bracketing_ok(self) -> bool:
        return self.bracketing is None or self.bracketing.passed

    @property
    def passed(self) -> bool:
        return (self.lmi_ok and self.metzler_ok and self.positivity_ok and self.schur_ok
                and self.multipliers_ok and self.bracketing_ok and self.hash_ok is not False)

    def failures(self) -> list:
        names = [("lmi", self.lmi_ok), ("metzler", self.metzler_ok), ("positivity", self.positivity_ok),
                 ("schur", self.schur_ok), ("multipliers", self.multipliers_ok),
                 ("bracketing", self.bracketing_ok), ("hash", self.hash_ok is not False)]
        return [n for n, ok in names if not ok]


_T0_NOTE = ("strict decrease of V can fail at t = 0 when x_lo(0) = x(0) = x_hi(0); "
            "the simulator allows that start")


def verify_certificate(gains: ObserverGains, plant: PlantModel, net: Optional[NeuralNet],
                       box=None, samples: int = 10_000, seed: int = 0,
                       tol_psd: Optional[float] = None) -> CertificateReport:
    """Re-check every certificate condition from the gains alone.

    ``box`` is ``(lo, hi)`` for the bracketing check; default ``[-1, 1]^n_x``.
    """
    plant.check_network(net)
    tol = gains.tol_psd if tol_psd is None else tol_psd
    n_x, n_y = plant.n_x, plant.n_y
    if gains.L_lo.shape != (n_x, n_y) or gains.L_hi.shape != (n_x, n_y):
        raise PlantError(f"gains must be {n_x}x{n_y} for this plant")
    n_phi = 0 if net is None else net.n_phi
    if gains.lam.shape != (n_phi,):
        raise PlantError(f"certificate lambda must have length {n_phi}")
    sector = gains.sector if gains.sector is not None else (
        None if net is None else global_sector(net.activation))
    lift = lift_system(plant)
    Q = gains.Q_diag
    M = gains.M

    q_min = float(Q.min())
    lam_min = float(gains.lam.min()) if gains.lam.size else np.inf
    mult_ok = q_min > 0.0 and lam_min >= 0.0

    lmi = lmi_matrix(plant, net, Q, M, np.maximum(gains.lam, 0.0), gains.k1, sector)
    lmi_eig = float(np.linalg.eigvalsh(0.5 * (lmi + lmi.T))[-1])

    E_lo = plant.A - gains.L_lo @ plant.C
    E_hi = plant.A - gains.L_hi @ plant.C
    m_lo, m_hi = _min_offdiag(E_lo), _min_offdiag(E_hi)
    X = np.diag(Q) @ lift.A - M @ lift.C
    pos = min(_min_offdiag(X[:n_x, :n_x]), _min_offdiag(X[n_x:, n_x:]))

    if mult_ok:
        sch = schur_matrix(plant, net, Q, gains.L_tilde, gains.lam, gains.k1, sector)
        sch_eig = float(np.linalg.eigvalsh(0.5 * (sch + sch.T))[-1])
    else:
        sch_eig = np.inf

    bracket = None
    if net is not None:
        lo, hi = box if box is not None else (-np.ones(n_x), np.ones(n_x))
        bracket = check_bracketing(net, build_aux_pair(net), lo, hi, samples=samples, seed=seed)

    return CertificateReport(
        lmi_max_eig=lmi_eig, lmi_ok=lmi_eig <= -tol,
        metzler_lo_min=m_lo, metzler_hi_min=m_hi,
        metzler_ok=is_metzler(E_lo) and is_metzler(E_hi),
        positivity_min=pos, positivity_ok=pos >= -gains.tol_lin * max(1.0, float(np.abs(X).max())),
        schur_max_eig=sch_eig, schur_ok=sch_eig < 0.0,
        q_min=q_min, lambda_min=lam_min, multipliers_ok=mult_ok,
        bracketing=bracket, notes=(_T0_NOTE,))


def synthesize(plant: PlantModel, net: Optional[NeuralNet],
               opts: SynthOptions = SynthOptions()) -> ObserverGains:
    """Solve the observer LMI and return verified gains ``L~ = Q^-1 M``.

    Raises :class:`SynthesisInfeasible` with the solver record when no
    certified point is found.
    """
    plant.check_network(net)
    pair = None if net is None else build_aux_pair(net)
    sector = None if net is None else global_sector(net.activation)
    k1 = compute_k1(plant.nonlin)
    problem = assemble_lmi(plant, net, pair, sector, k1, opts)
    lo, hi = problem.layout.bounds(opts.bound)
    if opts.bound != DEFAULT_BOUND:
        problem = LmiProblem(problem.layout, problem.F0, problem.F, problem.G0, problem.G, lo, hi)
    sol = solve_feasibility(problem, tol_psd=opts.tol_psd, tol_lin=opts.tol_lin,
                            max_iter=opts.max_iter, seed=opts.seed)
    if sol.status is not Status.FEASIBLE:
        raise SynthesisInfeasible(sol)
    q, m, lam = _unpack(sol.x, plant, 0 if net is None else net.n_phi)
    n_x = plant.n_x
    L_lo = m[0] / q[:n_x, None]
    L_hi = m[1] / q[n_x:, None]
    gains = ObserverGains(L_lo, L_hi, q.copy(), np.maximum(lam, 0.0), sol.margin, k1,
                          input_hash(plant, net), opts.seed, opts.tol_psd, opts.tol_lin, sector,
                          compute_k2(plant.nonlin), opts.eps_Q, opts.max_rate)
    report = verify_certificate(gains, plant, net, box=opts.bracket_box,
                                samples=opts.bracket_samples, seed=opts.seed)
    if not report.passed:
        raise CertificateError(f"solver point failed independent verification: {report.failures()}")
    return gains
