"""Synthetic modal datasets: rectangular-plate eigenmodes (closed form and
finite difference), a masked out-of-distribution plate family, and
forward-propagated hologram pressures.

Plate grids are the interior nodes of a (n+1)-interval lattice: a grid with
`cols` points and pitch hx spans a plate of width Lx = (cols+1)*hx whose
boundary lies exactly one pitch beyond the outermost nodes. This makes the
simply supported closure reproduce the discrete sine eigenvectors exactly and
keeps the NAH source raster and the eigensolver raster identical.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import (
    BinaryMask, ComplexField, Dataset, Family, NahConfig, NahError, Quantity,
    Sample, assign_splits, field_from_array, full_mask, normalize_sample,
)
from .propagate import PropagatorCache, forward as propagate_forward

MAX_FREQUENCY_HZ = 2000.0


class EmptyModeSet(NahError):
    """No eigenmode below the frequency cap."""


class EigensolverError(NahError):
    """Eigensolve failed or produced an unusable spectrum."""


class BoundaryCondition(str, enum.Enum):
    SimplySupported = "SimplySupported"
    Clamped = "Clamped"


@dataclass(frozen=True)
class PlateSpec:
    """Thin Kirchhoff-Love plate: geometry, material, boundary condition."""

    lx: float                     # x extent (long axis, column direction), m
    ly: float                     # y extent (short axis, row direction), m
    h: float                      # thickness, m
    youngs: float                 # Young's modulus, Pa
    poisson: float
    density: float                # kg/m^3
    bc: BoundaryCondition = BoundaryCondition.SimplySupported
    mask: BinaryMask | None = None

    def __post_init__(self):
        for name in ("lx", "ly", "h", "youngs", "density"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.poisson < 0.5:
            raise ValueError("poisson ratio must lie in (0, 0.5)")

    @property
    def rigidity(self) -> float:
        """Flexural rigidity D = E h^3 / (12 (1 - nu^2))."""
        return self.youngs * self.h ** 3 / (12.0 * (1.0 - self.poisson ** 2))

    def wave_speed_factor(self) -> float:
        """sqrt(D / (rho h)), the modal frequency scale."""
        return float(np.sqrt(self.rigidity / (self.density * self.h)))


# Spruce-like defaults at guitar scale; roughly a dozen modes land below the
# 2 kHz cap, ten of them under 800 Hz.
DEFAULT_PLATE = PlateSpec(
    lx=0.52, ly=0.204, h=0.0025, youngs=8.0e9, poisson=0.35, density=500.0,
    bc=BoundaryCondition.SimplySupported,
)


@dataclass(frozen=True)
class Mode:
    frequency: float
    shape: np.ndarray            # (rows, cols) real, unit max modulus
    index: int                   # 1-based, ascending frequency

    def __post_init__(self):
        arr = np.ascontiguousarray(self.shape, dtype=np.float64)
        arr.flags.writeable = False
        object.__setattr__(self, "shape", arr)


def _fix_sign_and_normalize(shape: np.ndarray) -> np.ndarray:
    flat = shape.reshape(-1)
    peak = np.argmax(np.abs(flat))
    m = abs(flat[peak])
    if m == 0:
        raise EigensolverError("degenerate zero mode shape")
    return shape * (np.sign(flat[peak]) / m)


def analytic_ss_modes(spec: PlateSpec, grid=(16, 64),
                      fmax: float = MAX_FREQUENCY_HZ) -> list:
    """Closed-form simply supported modes sampled on the interior lattice.

    f_mn = (pi/2) sqrt(D/(rho h)) ((m/Lx)^2 + (n/Ly)^2), shapes
    sin(m pi x/Lx) sin(n pi y/Ly); sorted ascending and cut at fmax.
    """
    if spec.bc is not BoundaryCondition.SimplySupported or spec.mask is not None:
        raise ValueError("analytic modes exist only for unmasked simply "
                         "supported plates")
    rows, cols = grid
    scale = (np.pi / 2.0) * spec.wave_speed_factor()
    # largest admissible half-wave counts at fmax
    m_max = int(np.floor(spec.lx * np.sqrt(fmax / scale)))
    n_max = int(np.floor(spec.ly * np.sqrt(fmax / scale)))
    xi = np.arange(1, cols + 1) / (cols + 1.0)   # fractional x of interior nodes
    eta = np.arange(1, rows + 1) / (rows + 1.0)
    found = []
    for m in range(1, max(m_max, 1) + 1):
        for n in range(1, max(n_max, 1) + 1):
            f = scale * ((m / spec.lx) ** 2 + (n / spec.ly) ** 2)
            if f <= fmax:
                shape = np.outer(np.sin(n * np.pi * eta), np.sin(m * np.pi * xi))
                found.append((f, shape))
    if not found:
        raise EmptyModeSet(f"no simply supported mode below {fmax} Hz")
    found.sort(key=lambda t: t[0])
    return [Mode(frequency=f, shape=_fix_sign_and_normalize(s), index=i + 1)
            for i, (f, s) in enumerate(found)]


def _biharmonic_matrix(rows, cols, hx, hy, sigma, active):
    """Dense 13-point biharmonic operator on the active interior nodes.

    Neighbors outside the active set are treated as boundary nodes (w = 0);
    when the distance-1 neighbor along an axis is already outside, the
    distance-2 neighbor is the mirror ghost sigma * w(center), with
    sigma = -1 for simply supported rims and +1 for clamped rims.
    """
    idx = -np.ones((rows, cols), dtype=int)
    act = np.argwhere(active)
    for k, (iy, ix) in enumerate(act):
        idx[iy, ix] = k
    n = len(act)
    a4x, a4y = 1.0 / hx ** 4, 1.0 / hy ** 4
    axy = 1.0 / (hx ** 2 * hy ** 2)
    mat = np.zeros((n, n))

    def on_grid(iy, ix):
        return 0 <= iy < rows and 0 <= ix < cols

    def live(iy, ix):
        return on_grid(iy, ix) and idx[iy, ix] >= 0

    for k, (iy, ix) in enumerate(act):
        mat[k, k] += 6.0 * a4x + 6.0 * a4y + 8.0 * axy
        for dy, dx, a4 in ((0, 1, a4x), (0, -1, a4x), (1, 0, a4y), (-1, 0, a4y)):
            q1 = (iy + dy, ix + dx)
            q2 = (iy + 2 * dy, ix + 2 * dx)
            c1 = -4.0 * (a4 + axy)
            if live(*q1):
                mat[k, idx[q1]] += c1
                if live(*q2):
                    mat[k, idx[q2]] += a4
                # else: boundary sits on q2, w = 0
            else:
                # boundary on q1; q2 is the ghost mirrored across it
                mat[k, k] += sigma * a4
        for dy in (-1, 1):
            for dx in (-1, 1):
                q = (iy + dy, ix + dx)
                if live(*q):
                    mat[k, idx[q]] += 2.0 * axy
    return mat, act, idx


def fd_eigensolve(spec: PlateSpec, grid=(16, 64),
                  fmax: float = MAX_FREQUENCY_HZ) -> list:
    """Finite-difference Kirchhoff-Love eigenmodes on the source lattice.

    Solves the discrete biharmonic eigenproblem, converts eigenvalues to
    frequencies via omega^2 = lam * D / (rho h), and returns unit-max,
    sign-fixed shapes for every mode at or below fmax.
    """
    rows, cols = grid
    hx = spec.lx / (cols + 1.0)
    hy = spec.ly / (rows + 1.0)
    if spec.mask is not None:
        if (spec.mask.rows, spec.mask.cols) != (rows, cols):
            raise ValueError("mask shape must match the grid")
        active = spec.mask.active
    else:
        active = np.ones((rows, cols), dtype=bool)
    sigma = -1.0 if spec.bc is BoundaryCondition.SimplySupported else 1.0
    mat, act, _ = _biharmonic_matrix(rows, cols, hx, hy, sigma, active)
    mat = 0.5 * (mat + mat.T)

    factor = spec.wave_speed_factor()
    lam_max = (2.0 * np.pi * fmax / factor) ** 2
    try:
        vals, vecs = scipy.linalg.eigh(mat, subset_by_value=(1e-9, lam_max))
    except scipy.linalg.LinAlgError as err:  # pragma: no cover
        raise EigensolverError(f"dense eigensolve failed: {err}") from err
    if vals.size == 0:
        raise EmptyModeSet(f"no finite-difference mode below {fmax} Hz")
    if np.any(vals <= 0):
        raise EigensolverError("nonpositive eigenvalue in plate spectrum")

    modes = []
    for i in range(vals.size):
        f = factor * np.sqrt(vals[i]) / (2.0 * np.pi)
        shape = np.zeros((rows, cols))
        shape[act[:, 0], act[:, 1]] = vecs[:, i]
        modes.append(Mode(frequency=float(f),
                          shape=_fix_sign_and_normalize(shape), index=i + 1))
    return modes


def mode_to_velocity(mode: Mode, excitation_phase: float = 0.0) -> ComplexField:
    """Unit-max complex normal velocity e^{j phase} * shape."""
    values = np.exp(1j * excitation_phase) * mode.shape.astype(np.complex128)
    return field_from_array(values, Quantity.NormalVelocity)


# ---------------------------------------------------------------------------
# plate samplers
# ---------------------------------------------------------------------------

LX_RANGE = (0.45, 0.65)
LY_RANGE = (0.18, 0.25)
H_RANGE = (0.0025, 0.004)
E_RANGE = (8.0e9, 14.0e9)
RHO_RANGE = (350.0, 500.0)
POISSON = 0.35


def _draw_dims_material(rng):
    return dict(
        lx=rng.uniform(*LX_RANGE), ly=rng.uniform(*LY_RANGE),
        h=rng.uniform(*H_RANGE), youngs=rng.uniform(*E_RANGE),
        poisson=POISSON, density=rng.uniform(*RHO_RANGE),
    )


def rect_plate_sampler(bc_choices=(BoundaryCondition.SimplySupported,
                                   BoundaryCondition.Clamped)):
    """Sampler over rectangular plates with spruce-like material draws."""
    choices = tuple(bc_choices)

    def draw(rng, grid) -> PlateSpec:
        bc = choices[int(rng.integers(len(choices)))]
        return PlateSpec(bc=bc, **_draw_dims_material(rng))

    return draw


def violin_outline_mask(rows, cols, rng, min_area=0.25) -> BinaryMask:
    """Two-lobed outline from two overlapping ellipses along the long axis.

    Resamples until the active area reaches min_area of the grid.
    """
    for _ in range(64):
        cx1 = rng.uniform(-0.50, -0.40)       # upper bout center (normalized x)
        cx2 = rng.uniform(0.28, 0.42)         # lower bout center
        ax1 = rng.uniform(0.28, 0.38)
        ay1 = rng.uniform(0.50, 0.68)
        ax2 = rng.uniform(0.40, 0.52)
        ay2 = rng.uniform(0.72, 0.90)
        xi = (np.arange(cols) - (cols - 1) / 2.0) / (cols / 2.0)
        eta = (np.arange(rows) - (rows - 1) / 2.0) / (rows / 2.0)
        xx, yy = np.meshgrid(xi, eta)
        lobe1 = ((xx - cx1) / ax1) ** 2 + (yy / ay1) ** 2 <= 1.0
        lobe2 = ((xx - cx2) / ax2) ** 2 + (yy / ay2) ** 2 <= 1.0
        bits = (lobe1 | lobe2).astype(np.uint8)
        if bits.sum() >= min_area * rows * cols:
            return BinaryMask(rows, cols, bits)
    raise EigensolverError("could not draw an outline with enough area")


# The clamped rim and reduced active area stiffen masked plates well beyond a
# real instrument top; thinner, softer draws bring a few dozen modes back
# under the frequency cap, matching the modal density of the target family.
OOD_H_RANGE = (0.0010, 0.0014)
OOD_E_RANGE = (6.0e9, 9.0e9)


def ood_plate_sampler():
    """Clamped plates with randomized violin-like outlines."""

    def draw(rng, grid) -> PlateSpec:
        mask = violin_outline_mask(grid[0], grid[1], rng)
        dims = _draw_dims_material(rng)
        dims["h"] = rng.uniform(*OOD_H_RANGE)
        dims["youngs"] = rng.uniform(*OOD_E_RANGE)
        return PlateSpec(bc=BoundaryCondition.Clamped, mask=mask, **dims)

    return draw


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

GENERATOR_VERSION = "nahlab-sim-1"


def _plate_modes(spec: PlateSpec, grid) -> list:
    if spec.bc is BoundaryCondition.SimplySupported and spec.mask is None:
        return analytic_ss_modes(spec, grid)
    return fd_eigensolve(spec, grid)


def _family_of(spec: PlateSpec) -> Family:
    if spec.mask is not None:
        return Family.MaskedOOD
    if spec.bc is BoundaryCondition.SimplySupported:
        return Family.RectSS
    return Family.RectClamped


def _sample_from_mode(config, cache, spec, mode, phase, sample_id):
    grid_mask = spec.mask if spec.mask is not None else full_mask(
        config.src_rows, config.src_cols)
    v_raw = mode_to_velocity(mode, phase)
    prop = cache.at(2.0 * np.pi * mode.frequency)
    p_raw = propagate_forward(prop, v_raw)
    if v_raw.max_modulus() == 0.0 or p_raw.max_modulus() == 0.0:
        return None
    v, p, norm_p, norm_v = normalize_sample(v_raw, p_raw)
    return Sample(id=sample_id, frequency=mode.frequency, mode_index=mode.index,
                  v_src=v, p_holo=p, mask=grid_mask, norm_p=norm_p,
                  norm_v=norm_v, family=_family_of(spec))


def _generate(config, draw_spec, count, seed, group, split_mode):
    """Plate-major generation: plate k draws from rng stream [seed, k]; each
    plate contributes one sample per eigenmode at or below the cap."""
    grid = (config.src_rows, config.src_cols)
    samples = []
    skipped = 0
    plate_idx = 0
    cache = PropagatorCache(config)
    while len(samples) < count:
        rng = np.random.default_rng([seed, plate_idx])
        spec = draw_spec(rng, grid)
        try:
            modes = _plate_modes(spec, grid)
        except EmptyModeSet:
            plate_idx += 1
            continue
        for mode in modes:
            if len(samples) >= count:
                break
            phase = rng.uniform(0.0, 2.0 * np.pi)
            sid = f"{group}-{seed:d}-p{plate_idx:04d}-m{mode.index:03d}"
            s = _sample_from_mode(config, cache, spec, mode, phase, sid)
            if s is None:
                skipped += 1
                continue
            samples.append(s)
        plate_idx += 1
        if plate_idx > 64 * max(count, 1):
            raise EigensolverError("sampler failed to produce enough samples")

    if split_mode == "8:1:1":
        split = assign_splits([s.id for s in samples],
                              np.random.default_rng([seed, 1 << 30]))
    else:
        split = {s.id: "test" for s in samples}
    manifest = {
        "seed": int(seed),
        "generator": GENERATOR_VERSION,
        "group": group,
        "config": config.to_dict(),
        "convention": "single mode per sample, unit-amplitude excitation at a "
                      "random global phase",
        "skipped_zero_fields": skipped,
    }
    return Dataset(samples=samples, split=split, manifest=manifest)


def synth_dataset(config: NahConfig, draw_spec, count: int, seed: int) -> Dataset:
    """Rectangular-plate pre-training corpus with an 8:1:1 split."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return _generate(config, draw_spec, count, seed, "rect", "8:1:1")


def make_ood_family(config: NahConfig, count: int, seed: int) -> Dataset:
    """Masked clamped plates standing in for the irregular target family."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return _generate(config, ood_plate_sampler(), count, seed, "ood", "all-test")
