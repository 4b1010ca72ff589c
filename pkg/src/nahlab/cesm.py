"""Compressive equivalent-source baseline: L1-regularized recovery of
fictitious monopole strengths behind the source plane, a regularization
sweep selected by hologram-pressure MAE, and velocity reconstruction.

The solver is FISTA with a monotone restart: whenever the extrapolated step
would increase the objective, the iterate falls back to a plain proximal
step from the previous point (which the 1/L majorization makes non-increasing)
and the momentum restarts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ComplexField, NahConfig, NahError, Quantity, field_from_array
from .propagate import green, green_dndz


class SolverFailure(NahError):
    """Every regularization weight failed to produce a usable solve."""


def lambda_grid_linear(lo: float = 0.001, hi: float = 0.1, count: int = 5) -> tuple:
    """Evenly spaced regularization weights over [lo, hi]."""
    return tuple(float(x) for x in np.linspace(lo, hi, count))


@dataclass(frozen=True)
class EsmConfig:
    retreat_distance: float = 0.02       # ES plane depth behind the source, m
    es_rows: int | None = None           # default: the source grid
    es_cols: int | None = None
    lambda_grid: tuple = lambda_grid_linear()
    fista_iters: int = 2000
    fista_tol: float = 1e-6

    def __post_init__(self):
        if not self.retreat_distance > 0:
            raise ValueError("retreat_distance must be positive")
        lam = tuple(self.lambda_grid)
        if any(b <= a for a, b in zip(lam, lam[1:])):
            raise ValueError("lambda_grid must be strictly ascending")


@dataclass(frozen=True)
class EsmDictionary:
    """Gp: ES -> hologram pressure; Gv: ES -> source-plane normal velocity."""

    gp: np.ndarray               # (M, Q) complex
    gv: np.ndarray               # (N, Q) complex
    omega: float


@dataclass
class EsmResult:
    q: np.ndarray                # (Q,) complex ES coefficients
    lambda_chosen: float
    p_rec: ComplexField
    v_rec: ComplexField
    mae_table: list              # [(lambda, mae)] in grid order


def _es_points(config: NahConfig, esm: EsmConfig) -> np.ndarray:
    rows = esm.es_rows or config.src_rows
    cols = esm.es_cols or config.src_cols
    iy = (np.arange(rows) - (rows - 1) / 2.0) * config.src_pitch_y
    ix = (np.arange(cols) - (cols - 1) / 2.0) * config.src_pitch_x
    yy, xx = np.meshgrid(iy, ix, indexing="ij")
    z = np.full(rows * cols, -esm.retreat_distance)
    return np.stack([xx.reshape(-1), yy.reshape(-1), z], axis=1)


def build_dictionary(config: NahConfig, esm: EsmConfig, omega: float) -> EsmDictionary:
    """Monopole dictionaries from the retreated ES plane.

    Gp entries are the pressure kernel -j omega rho0 * g at the hologram
    points. Gv applies Euler's equation v = -(1/(j omega rho0)) dp/dz to
    that same pressure kernel at the source plane, which collapses to the
    plain receiver-height derivative dg/dz; using the same kernel for both
    keeps the recovered velocity on the physical scale and phase.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    es = _es_points(config, esm)
    holo = config.holo_points()
    src = config.src_points()
    k = omega / config.c

    def _dist(a, b):
        diff = a[:, None, :] - b[None, :, :]
        return diff, np.sqrt(np.sum(diff * diff, axis=2))

    _, dh = _dist(holo, es)
    g_h = np.exp(-1j * k * dh) / (4.0 * np.pi * dh)
    gp = -1j * omega * config.rho0 * g_h

    diff_s, ds = _dist(src, es)
    g_s = np.exp(-1j * k * ds) / (4.0 * np.pi * ds)
    gv = diff_s[:, :, 2] / ds * (-1j * k - 1.0 / ds) * g_s
    return EsmDictionary(gp=gp, gv=gv, omega=float(omega))


def _objective(a, b, lam, q):
    r = a @ q - b
    return 0.5 * float(np.vdot(r, r).real) + lam * float(np.abs(q).sum())


def _soft(z, t):
    mag = np.abs(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(mag > t, 1.0 - t / np.where(mag > 0, mag, 1.0), 0.0)
    return z * shrink


def fista(a: np.ndarray, b: np.ndarray, lam: float, iters: int = 2000,
          tol: float = 1e-6):
    """Minimize 0.5 ||A q - b||^2 + lam ||q||_1 over complex q.

    Step size 1/L with L the largest eigenvalue of A^H A from power
    iteration; complex soft-thresholding as the proximal map; monotone via
    restart. Returns (q, objective history).
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    m, n = a.shape
    lip = _power_iteration_sq(a)
    if lip == 0.0:
        return np.zeros(n, dtype=np.complex128), [0.0]
    t_step = 1.0 / lip

    ah = a.conj().T
    x = np.zeros(n, dtype=np.complex128)
    y = x
    mom = 1.0
    obj = [_objective(a, b, lam, x)]
    for _ in range(iters):
        grad = ah @ (a @ y - b)
        x_new = _soft(y - t_step * grad, t_step * lam)
        f_new = _objective(a, b, lam, x_new)
        if f_new > obj[-1]:
            # restart: plain proximal step from the last accepted iterate,
            # backtracking if the power-iteration step was optimistic
            grad = ah @ (a @ x - b)
            t_local = t_step
            for _bt in range(40):
                x_new = _soft(x - t_local * grad, t_local * lam)
                f_new = _objective(a, b, lam, x_new)
                if f_new <= obj[-1]:
                    break
                t_local *= 0.5
            else:
                x_new, f_new = x, obj[-1]
            mom = 1.0
        mom_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * mom * mom))
        y = x_new + ((mom - 1.0) / mom_new) * (x_new - x)
        x = x_new
        mom = mom_new
        obj.append(f_new)
        denom = max(abs(obj[-2]), 1e-30)
        if abs(obj[-1] - obj[-2]) / denom < tol:
            break
    return x, obj


def _power_iteration_sq(a, iters: int = 60, seed: int = 0) -> float:
    """Largest eigenvalue of A^H A (squared top singular value of A)."""
    n = a.shape[1]
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    nrm = np.linalg.norm(q)
    if nrm == 0:
        return 0.0
    q /= nrm
    lam = 0.0
    ah = a.conj().T
    for _ in range(iters):
        z = ah @ (a @ q)
        nrm = np.linalg.norm(z)
        if nrm == 0.0:
            return 0.0
        q = z / nrm
        lam = nrm
    return float(lam * 1.0000001)   # tiny safety margin keeps 1/L a descent step


def cesm_solve(p_h: ComplexField, omega: float, config: NahConfig,
               esm: EsmConfig = EsmConfig()) -> EsmResult:
    """Sweep the regularization grid, keep the best hologram-pressure fit.

    The solve runs on a normalized problem (unit-norm dictionary columns,
    pressure scaled to unit max modulus) so the fixed lambda grid has a
    consistent meaning across frequencies; coefficients are mapped back to
    the physical problem before reconstruction.
    """
    d = build_dictionary(config, esm, omega)
    b_phys = p_h.vector
    scale = float(np.max(np.abs(b_phys)))
    if scale == 0.0:
        raise SolverFailure("hologram pressure is identically zero")
    col_norms = np.linalg.norm(d.gp, axis=0)
    if np.any(col_norms == 0):
        raise SolverFailure("dictionary contains a zero column")
    a = d.gp / col_norms[None, :]
    b = b_phys / scale

    best = None
    table = []
    diagnostics = []
    for lam in esm.lambda_grid:
        q_n, obj = fista(a, b, lam, iters=esm.fista_iters, tol=esm.fista_tol)
        if not np.all(np.isfinite(q_n.view(np.float64))):
            diagnostics.append((lam, "non-finite solution"))
            continue
        q = q_n / col_norms * scale
        p_rec = d.gp @ q
        mae = float(np.mean(np.abs(p_rec - b_phys)))
        table.append((float(lam), mae))
        if best is None or mae < best[1]:
            best = (q, mae, float(lam), p_rec)
    if best is None:
        raise SolverFailure(f"all lambda solves failed: {diagnostics}")
    q, _, lam_chosen, p_rec = best
    v_rec = d.gv @ q
    holo_shape = (config.holo_rows, config.holo_cols)
    src_shape = (config.src_rows, config.src_cols)
    return EsmResult(
        q=q, lambda_chosen=lam_chosen,
        p_rec=field_from_array(p_rec.reshape(holo_shape), Quantity.Pressure),
        v_rec=field_from_array(v_rec.reshape(src_shape), Quantity.NormalVelocity),
        mae_table=table,
    )
