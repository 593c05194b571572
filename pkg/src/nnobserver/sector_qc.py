"""Sector bounds for activations and the quadratic-constraint matrices.

Hidden-layer differences between the network and its bounding pair are tied
together by a constant matrix ``N``:

    [phi - phi_lo; phi_hi - phi; v - v_lo; v_hi - v]
        = N [x - x_lo; x_hi - x; w - w_lo; w_hi - w]

and the sector condition ``alpha <= chord slope <= beta`` turns into a
quadratic form that is nonnegative on every admissible triple
``x_lo <= x <= x_hi``.  Stacked vectors over the ``n_phi`` hidden neurons are
always ordered layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nnet import (Activation, ActivationKind, AuxNetPair, NetworkError, NeuralNet,
                   aux_forward, forward)

__all__ = [
    "SectorBound",
    "NBlocks",
    "QcMatrices",
    "SectorError",
    "global_sector",
    "local_offset_sector",
    "build_N",
    "build_qc_matrices",
    "psi_m_psi",
    "stacked_differences",
    "evaluate_pi",
    "evaluate_pi_sum",
]

OUTWARD = 1e-9
GRID_POINTS = 4096
SINGULAR_EXCLUSION = 1e-12


class SectorError(ValueError):
    pass


@dataclass(frozen=True)
class SectorBound:
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.alpha <= self.beta:
            raise SectorError(f"sector requires alpha <= beta, got [{self.alpha}, {self.beta}]")


def global_sector(activation: Activation) -> SectorBound:
    """Sector valid around every reference point and on all of the real line."""
    if isinstance(activation, str):
        activation = Activation.parse(activation)
    kind = activation.kind
    if kind in (ActivationKind.TANH, ActivationKind.RELU):
        return SectorBound(0.0, 1.0)
    if kind is ActivationKind.SIGMOID:
        return SectorBound(0.0, 0.25)
    if kind is ActivationKind.LEAKY_RELU:
        return SectorBound(activation.slope, 1.0)
    raise SectorError(f"no global sector registered for {kind!r}")


# --- local offset sectors ----------------------------------------------------

def _chord(activation: Activation, v, v_star):
    """Chord slope ``(psi(v) - psi(v*)) / (v - v*)`` in a cancellation-free form.

    Uses ``tanh a - tanh b = sinh(a - b) / (cosh a cosh b)``; sigmoid is
    ``(1 + tanh(v/2)) / 2``.
    """
    v = np.asarray(v, dtype=float)
    d = v - v_star
    kind = activation.kind
    with np.errstate(over="ignore", invalid="ignore"):
        direct = (activation(v) - activation(v_star)) / d
        if kind is ActivationKind.TANH:
            stable = np.sinh(d) / (d * np.cosh(v) * np.cosh(v_star))
        elif kind is ActivationKind.SIGMOID:
            stable = np.sinh(0.5 * d) / (2.0 * d * np.cosh(0.5 * v) * np.cosh(0.5 * v_star))
        else:
            return direct
    # the product form overflows for |v| beyond ~700, where the direct quotient is exact enough
    return np.where(np.isfinite(stable), stable, direct)


def _piecewise_linear_sector(activation: Activation, v_lo, v_hi, v_star):
    # ReLU / leaky ReLU are convex, so the chord slope from v* is nondecreasing in v.
    s = 0.0 if activation.kind is ActivationKind.RELU else activation.slope
    left_deriv = s if v_star <= 0.0 else 1.0
    right_deriv = 1.0 if v_star >= 0.0 else s
    alpha = float(_chord(activation, v_lo, v_star)) if v_lo < v_star else right_deriv
    beta = float(_chord(activation, v_hi, v_star)) if v_hi > v_star else left_deriv
    # chord slopes of a two-piece map lie in [s, 1]; clip away rounding
    alpha, beta = (min(max(c, s), 1.0) for c in (alpha, beta))
    return min(alpha, beta), max(alpha, beta)


def _golden(f, a, b, iters=80):
    """Minimize a unimodal-on-[a, b] function; returns (x, f(x))."""
    g = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def _grid_sector(activation: Activation, v_lo, v_hi, v_star, points=GRID_POINTS):
    grid = np.linspace(v_lo, v_hi, points)
    grid = grid[np.abs(grid - v_star) > SINGULAR_EXCLUSION]
    slopes = _chord(activation, grid, v_star) if grid.size else np.empty(0)
    cands_lo = [float(activation.derivative(v_star))]
    cands_hi = list(cands_lo)
    step = (v_hi - v_lo) / (points - 1)
    for sign, cands in ((1.0, cands_lo), (-1.0, cands_hi)):
        if not slopes.size:
            continue
        k = int(np.argmin(sign * slopes))
        cands.append(float(slopes[k]))
        # polish the best grid point on its neighbouring cells, staying off v*
        a, b = max(v_lo, grid[k] - step), min(v_hi, grid[k] + step)
        pieces = [(a, b)]
        if a < v_star < b:
            pieces = [(a, v_star - SINGULAR_EXCLUSION), (v_star + SINGULAR_EXCLUSION, b)]
        for pa, pb in pieces:
            if pb > pa:
                _, fx = _golden(lambda t: sign * float(_chord(activation, t, v_star)), pa, pb)
                cands.append(sign * fx)
    return min(cands_lo), max(cands_hi)


def local_offset_sector(activation: Activation, v_lo: float, v_hi: float, v_star: float,
                        grid_points: int = GRID_POINTS) -> SectorBound:
    """Tightest ``[alpha, beta]`` of chord slopes through ``(v*, psi(v*))`` on ``[v_lo, v_hi]``.

    Closed form for ReLU and leaky ReLU; tanh and sigmoid use a dense grid
    polished by golden-section search and are rounded outward by ``1e-9``.
    """
    if isinstance(activation, str):
        activation = Activation.parse(activation)
    if not (v_lo <= v_star <= v_hi):
        raise SectorError(f"need v_lo <= v_star <= v_hi, got {v_lo}, {v_star}, {v_hi}")
    if not v_lo < v_hi:
        raise SectorError("sector interval must have v_lo < v_hi")
    if activation.kind in (ActivationKind.RELU, ActivationKind.LEAKY_RELU):
        return SectorBound(*_piecewise_linear_sector(activation, v_lo, v_hi, v_star))
    alpha, beta = _grid_sector(activation, v_lo, v_hi, v_star, grid_points)
    return SectorBound(alpha - OUTWARD, beta + OUTWARD)


# --- N matrix ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NBlocks:
    """Blocks of ``N`` acting on ``[x - x_lo; x_hi - x]`` and ``[w - w_lo; w_hi - w]``."""

    N_phi_x: np.ndarray  # (2 n_out, 2 n_x), identically zero
    N_phi_w: np.ndarray  # (2 n_out, 2 n_phi)
    N_v_x: np.ndarray    # (2 n_phi, 2 n_x)
    N_v_w: np.ndarray    # (2 n_phi, 2 n_phi)
    n_phi: int

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.N_phi_x, self.N_phi_w], [self.N_v_x, self.N_v_w]])


def build_N(pair: AuxNetPair) -> NBlocks:
    net = pair.parent
    n_x, n_out, n_phi = net.n_in, net.n_out, net.n_phi
    hidden = [W.shape[0] for W in net.weights[:-1]]
    offsets = np.concatenate([[0], np.cumsum(hidden)]).astype(int)

    N_phi_x = np.zeros((2 * n_out, 2 * n_x))
    N_phi_w = np.zeros((2 * n_out, 2 * n_phi))
    N_v_x = np.zeros((2 * n_phi, 2 * n_x))
    N_v_w = np.zeros((2 * n_phi, 2 * n_phi))

    def place(dst, rows, cols, n_cols_half, Wn, Wp):
        # [[Wp, -Wn], [-Wn, Wp]] at (rows, cols) in the doubled layout
        r0, r1 = rows
        c0, c1 = cols
        dst[r0:r1, c0:c1] = Wp
        dst[r0:r1, n_cols_half + c0:n_cols_half + c1] = -Wn
        h = dst.shape[0] // 2
        dst[h + r0:h + r1, c0:c1] = -Wn
        dst[h + r0:h + r1, n_cols_half + c0:n_cols_half + c1] = Wp

    L = net.layer_count
    for l in range(L):
        rows = (offsets[l], offsets[l + 1])
        if l == 0:
            place(N_v_x, rows, (0, n_x), n_x, pair.lower[0], pair.upper[0])
        else:
            place(N_v_w, rows, (offsets[l - 1], offsets[l]), n_phi, pair.lower[l], pair.upper[l])
    if L == 0:
        # affine-only network: the output difference is driven by the input directly
        place(N_phi_x, (0, n_out), (0, n_x), n_x, pair.lower[0], pair.upper[0])
    else:
        place(N_phi_w, (0, n_out), (offsets[L - 1], offsets[L]), n_phi, pair.lower[L], pair.upper[L])
    return NBlocks(N_phi_x, N_phi_w, N_v_x, N_v_w, n_phi)


def stacked_differences(net: NeuralNet, pair: AuxNetPair, x_lo, x, x_hi, clamped: bool = False):
    """Return ``(lhs, rhs)`` stacks so that ``lhs = N @ rhs`` for unclamped outputs.

    ``lhs = [phi - phi_lo; phi_hi - phi; v - v_lo; v_hi - v]`` and
    ``rhs = [x - x_lo; x_hi - x; w - w_lo; w_hi - w]``.
    """
    mid = forward(net, x)
    lo, hi = aux_forward(pair, x_lo, x_hi)
    key = "output" if clamped else "raw_output"
    p, p_lo, p_hi = (getattr(t, key) for t in (mid, lo, hi))
    v, v_lo, v_hi = mid.stacked_pre(), lo.stacked_pre(), hi.stacked_pre()
    w, w_lo, w_hi = mid.stacked_post(), lo.stacked_post(), hi.stacked_post()
    x_lo, x, x_hi = (np.asarray(a, dtype=float) for a in (x_lo, x, x_hi))
    lhs = np.concatenate([p - p_lo, p_hi - p, v - v_lo, v_hi - v], axis=-1)
    rhs = np.concatenate([x - x_lo, x_hi - x, w - w_lo, w_hi - w], axis=-1)
    return lhs, rhs


# --- QC matrices ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QcMatrices:
    F_ab: np.ndarray
    F_apb: np.ndarray
    F_l: np.ndarray
    lam: np.ndarray
    sector: SectorBound

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.F_ab, self.F_apb], [self.F_apb, self.F_l]])


def _check_lambda(lam) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.ndim != 1:
        raise SectorError("lambda must be a vector")
    if np.any(lam < 0.0) or not np.all(np.isfinite(lam)):
        raise SectorError("lambda must be finite and nonnegative entrywise")
    return lam


def psi_m_psi(sector: SectorBound, lam) -> np.ndarray:
    """Explicit product ``Psi^T M(lam) Psi`` over the doubled ``[dv_lo; dv_hi; dw_lo; dw_hi]``."""
    lam = _check_lambda(lam)
    n = lam.size
    I, Z = np.eye(n), np.zeros((n, n))
    A, B, Lm = sector.alpha * I, sector.beta * I, np.diag(lam)
    Psi = np.block([[B, Z, -I, Z], [Z, B, Z, -I], [-A, Z, I, Z], [Z, -A, Z, I]])
    M = np.block([[Z, Z, Lm, Z], [Z, Z, Z, Lm], [Lm, Z, Z, Z], [Z, Lm, Z, Z]])
    return Psi.T @ M @ Psi


def build_qc_matrices(sector: SectorBound, lam, verify: bool = True) -> QcMatrices:
    lam = _check_lambda(lam)
    a, b = sector.alpha, sector.beta
    D = np.diag(np.concatenate([lam, lam]))
    qc = QcMatrices(-2.0 * a * b * D, (a + b) * D, -2.0 * D, lam, sector)
    if verify:
        ref = psi_m_psi(sector, lam)
        scale = max(1.0, float(np.abs(ref).max()))
        if np.abs(qc.full - ref).max() > 1e-12 * scale:
            raise SectorError("QC block formulas disagree with the explicit Psi^T M Psi product")
    return qc


def _pi_vector(net, pair, x_lo, x, x_hi):
    x_lo, x, x_hi = (np.asarray(a, dtype=float) for a in (x_lo, x, x_hi))
    if np.any(x_lo > x) or np.any(x > x_hi):
        raise NetworkError("need x_lo <= x <= x_hi entrywise")
    mid = forward(net, x)
    lo, hi = aux_forward(pair, x_lo, x_hi)
    v, v_lo, v_hi = mid.stacked_pre(), lo.stacked_pre(), hi.stacked_pre()
    w, w_lo, w_hi = mid.stacked_post(), lo.stacked_post(), hi.stacked_post()
    return v - v_lo, v_hi - v, w - w_lo, w_hi - w


def evaluate_pi(net: NeuralNet, pair: AuxNetPair, x_lo, x, x_hi, lam,
                sector: Optional[SectorBound] = None):
    """Quadratic form of the assembled QC matrix on the stacked hidden differences.

    Returns a scalar, or one value per sample for batched inputs.
    """
    sector = sector or global_sector(net.activation)
    z = np.concatenate(_pi_vector(net, pair, x_lo, x, x_hi), axis=-1)
    P = build_qc_matrices(sector, lam, verify=False).full
    return np.einsum("...i,ij,...j->...", z, P, z)


def evaluate_pi_sum(net: NeuralNet, pair: AuxNetPair, x_lo, x, x_hi, lam,
                    sector: Optional[SectorBound] = None):
    """Same value via the per-neuron sum ``2 lam_i (dw - a dv)(b dv - dw)`` over both sides."""
    sector = sector or global_sector(net.activation)
    lam = _check_lambda(lam)
    a, b = sector.alpha, sector.beta
    dv_lo, dv_hi, dw_lo, dw_hi = _pi_vector(net, pair, x_lo, x, x_hi)
    terms = lam * ((dw_lo - a * dv_lo) * (b * dv_lo - dw_lo) + (dw_hi - a * dv_hi) * (b * dv_hi - dw_hi))
    # the symmetric matrix counts every cross term twice
    return 2.0 * terms.sum(axis=-1)
