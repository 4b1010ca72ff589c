"""Free-field Green's functions and the discrete velocity-to-pressure operator.

The forward model is the baffled-plane (Rayleigh) form of the boundary
integral: only the velocity term is kept, with a configurable baffle factor
(2.0 for a rigid baffle, 1.0 for the bare second term), midpoint quadrature
with uniform cell area, source plane at z = 0 and hologram plane at z = z_h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ComplexField, NahConfig, NahError, Quantity, field_from_array


class SingularGreen(NahError):
    """Green's function evaluated at coincident points."""


def green(r, s, omega: float, c: float) -> complex:
    """Free-field Green's function g = exp(-j(omega/c)d) / (4 pi d), d = |r-s|."""
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    d = float(np.linalg.norm(r - s))
    if d == 0.0:
        raise SingularGreen("green() at coincident points")
    k = omega / c
    return complex(np.exp(-1j * k * d) / (4.0 * np.pi * d))


def green_dndz(r, s, omega: float, c: float) -> complex:
    """Analytic z-derivative of green with respect to the receiver height.

    Equals (z_r - z_s)/d * (-j omega/c - 1/d) * g(r, s); vanishes for
    coplanar points. The +z direction is the outward normal of the source
    plane.
    """
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    d = float(np.linalg.norm(r - s))
    if d == 0.0:
        raise SingularGreen("green_dndz() at coincident points")
    k = omega / c
    g = np.exp(-1j * k * d) / (4.0 * np.pi * d)
    return complex((r[2] - s[2]) / d * (-1j * k - 1.0 / d) * g)


@dataclass(frozen=True)
class Propagator:
    """Dense M x N map from source normal velocity to hologram pressure."""

    matrix: np.ndarray      # (M, N) complex128, read-only
    omega: float
    geometry_hash: str
    holo_shape: tuple       # (rows, cols) with rows*cols = M
    src_shape: tuple        # (rows, cols) with rows*cols = N

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.complex128)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self):
        return self.matrix.shape


def build_propagator(config: NahConfig, omega: float) -> Propagator:
    """Assemble the discrete propagation matrix at angular frequency omega.

    Entry (m, n) = baffle_factor * (-j omega rho0) * g(r_m, s_n) * dS with
    dS = src_pitch_x * src_pitch_y. Deterministic for fixed (config, omega).
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    r = config.holo_points()            # (M, 3)
    s = config.src_points()             # (N, 3)
    diff = r[:, None, :] - s[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    k = omega / config.c
    g = np.exp(-1j * k * dist) / (4.0 * np.pi * dist)
    ds = config.src_pitch_x * config.src_pitch_y
    matrix = config.baffle_factor * (-1j * omega * config.rho0) * g * ds
    return Propagator(
        matrix=matrix, omega=float(omega),
        geometry_hash=config.geometry_hash(),
        holo_shape=(config.holo_rows, config.holo_cols),
        src_shape=(config.src_rows, config.src_cols),
    )


def forward(p: Propagator, v: ComplexField) -> ComplexField:
    """Hologram pressure predicted from a source velocity field."""
    if v.rows * v.cols != p.matrix.shape[1]:
        raise ValueError(
            f"velocity has {v.rows * v.cols} points, propagator expects "
            f"{p.matrix.shape[1]}"
        )
    out = p.matrix @ v.vector
    return field_from_array(out.reshape(p.holo_shape), Quantity.Pressure)


def adjoint(p: Propagator, press: ComplexField) -> ComplexField:
    """Conjugate-transpose application, the gradient map of forward."""
    if press.rows * press.cols != p.matrix.shape[0]:
        raise ValueError(
            f"pressure has {press.rows * press.cols} points, propagator expects "
            f"{p.matrix.shape[0]}"
        )
    out = p.matrix.conj().T @ press.vector
    return field_from_array(out.reshape(p.src_shape), Quantity.NormalVelocity)


class PropagatorCache:
    """Per-run memo keyed by (geometry hash, omega)."""

    def __init__(self, config: NahConfig):
        self.config = config
        self._memo: dict = {}

    def at(self, omega: float) -> Propagator:
        key = (self.config.geometry_hash(), float(omega))
        if key not in self._memo:
            self._memo[key] = build_propagator(self.config, omega)
        return self._memo[key]
