"""Domain types, physical configuration, normalization, and on-disk containers.

Grid convention used across the package: a field of shape (rows, cols) lives on
a planar lattice where the row index runs along the y axis and the column index
along the x axis. Node (iy, ix) of a (rows, cols) grid with pitches (py, px)
sits at x = (ix - (cols-1)/2)*px, y = (iy - (rows-1)/2)*py, so every grid is
centered on the origin of its plane. Vectors are row-major flattenings.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class NahError(Exception):
    """Base class for nahlab errors."""


class DegenerateField(NahError):
    """A field that is identically zero cannot be normalized."""


class BadMagic(NahError):
    """File does not start with the expected container magic."""


class TruncatedPayload(NahError):
    """File ended before the declared payload was complete."""


class ShapeOverflow(NahError):
    """Declared shape exceeds the sane size cap for this container."""


class CorruptPayload(NahError):
    """Payload bytes do not match the stored content hash."""


class InconsistentManifest(NahError):
    """Dataset directory disagrees with its manifest."""


class InvalidSample(NahError):
    """A stored sample violates the Sample invariants."""


class Quantity(enum.IntEnum):
    Pressure = 1
    NormalVelocity = 2


@dataclass(frozen=True)
class ComplexField:
    """A 2-D grid of complex scalars (pressure in Pa or velocity in m/s)."""

    rows: int
    cols: int
    values: np.ndarray  # shape (rows, cols), complex128, read-only
    quantity: Quantity

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.complex128).reshape(
            self.rows, self.cols
        )
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        if not np.all(np.isfinite(arr.view(np.float64))):
            raise InvalidSample("field contains non-finite entries")

    @property
    def vector(self) -> np.ndarray:
        """Row-major flattening, length rows*cols."""
        return self.values.reshape(-1)

    def max_modulus(self) -> float:
        return float(np.max(np.abs(self.values)))


def field_from_array(arr, quantity: Quantity) -> ComplexField:
    arr = np.asarray(arr, dtype=np.complex128)
    return ComplexField(arr.shape[0], arr.shape[1], arr.copy(), quantity)


@dataclass(frozen=True)
class BinaryMask:
    """Active-point selector on the source grid."""

    rows: int
    cols: int
    bits: np.ndarray  # shape (rows, cols), uint8 in {0, 1}, read-only

    def __post_init__(self):
        arr = np.ascontiguousarray(self.bits, dtype=np.uint8).reshape(
            self.rows, self.cols
        )
        if not np.all((arr == 0) | (arr == 1)):
            raise InvalidSample("mask bits must be 0 or 1")
        if int(arr.sum()) == 0:
            raise InvalidSample("mask must have at least one active bit")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def active(self) -> np.ndarray:
        return self.bits.astype(bool)

    def active_count(self) -> int:
        return int(self.bits.sum())


def full_mask(rows: int, cols: int) -> BinaryMask:
    return BinaryMask(rows, cols, np.ones((rows, cols), dtype=np.uint8))


@dataclass(frozen=True)
class NahConfig:
    """Measurement geometry and physical constants.

    The hologram plane sits at z = z_h above the source plane (z = 0); both
    grids are centered on the same axis. Default pitches put the source
    aperture at roughly guitar scale (0.512 m x 0.192 m) with the hologram
    covering the same footprint with 8x8 microphones.
    """

    holo_rows: int = 8
    holo_cols: int = 8
    src_rows: int = 16
    src_cols: int = 64
    holo_pitch_x: float = 0.064
    holo_pitch_y: float = 0.024
    src_pitch_x: float = 0.008
    src_pitch_y: float = 0.012
    z_h: float = 0.0312
    c: float = 343.0
    rho0: float = 1.225
    baffle_factor: float = 2.0

    def __post_init__(self):
        for name in ("holo_rows", "holo_cols", "src_rows", "src_cols"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in (
            "holo_pitch_x", "holo_pitch_y", "src_pitch_x", "src_pitch_y",
            "z_h", "c", "rho0",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.baffle_factor not in (1.0, 2.0):
            raise ValueError("baffle_factor must be 1.0 (free) or 2.0 (baffled)")

    @property
    def n_holo(self) -> int:
        return self.holo_rows * self.holo_cols

    @property
    def n_src(self) -> int:
        return self.src_rows * self.src_cols

    def holo_points(self) -> np.ndarray:
        """(M, 3) hologram microphone positions at z = z_h, row-major order."""
        return _grid_points(
            self.holo_rows, self.holo_cols, self.holo_pitch_y,
            self.holo_pitch_x, self.z_h,
        )

    def src_points(self) -> np.ndarray:
        """(N, 3) source reconstruction points at z = 0, row-major order."""
        return _grid_points(
            self.src_rows, self.src_cols, self.src_pitch_y, self.src_pitch_x, 0.0
        )

    def to_dict(self) -> dict:
        return {
            "holo_rows": self.holo_rows, "holo_cols": self.holo_cols,
            "src_rows": self.src_rows, "src_cols": self.src_cols,
            "holo_pitch_x": self.holo_pitch_x, "holo_pitch_y": self.holo_pitch_y,
            "src_pitch_x": self.src_pitch_x, "src_pitch_y": self.src_pitch_y,
            "z_h": self.z_h, "c": self.c, "rho0": self.rho0,
            "baffle_factor": self.baffle_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NahConfig":
        return cls(**{k: type_(d[k]) for k, type_ in _CONFIG_FIELD_TYPES.items()})

    def geometry_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_CONFIG_FIELD_TYPES = {
    "holo_rows": int, "holo_cols": int, "src_rows": int, "src_cols": int,
    "holo_pitch_x": float, "holo_pitch_y": float,
    "src_pitch_x": float, "src_pitch_y": float,
    "z_h": float, "c": float, "rho0": float, "baffle_factor": float,
}


def _grid_points(rows, cols, pitch_y, pitch_x, z):
    iy = (np.arange(rows) - (rows - 1) / 2.0) * pitch_y
    ix = (np.arange(cols) - (cols - 1) / 2.0) * pitch_x
    yy, xx = np.meshgrid(iy, ix, indexing="ij")
    pts = np.stack([xx.reshape(-1), yy.reshape(-1), np.full(rows * cols, z)], axis=1)
    return pts


class Family(str, enum.Enum):
    RectSS = "RectSS"
    RectClamped = "RectClamped"
    MaskedOOD = "MaskedOOD"


@dataclass(frozen=True)
class Sample:
    """One (frequency, source velocity, hologram pressure) record.

    Stored fields are normalized to unit max modulus; norm_p and norm_v are
    the moduli that restore the physical scale by multiplication.
    """

    id: str
    frequency: float
    mode_index: int
    v_src: ComplexField
    p_holo: ComplexField
    mask: BinaryMask
    norm_p: float
    norm_v: float
    family: Family

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency


def validate_sample(s: Sample, max_frequency: float = 2000.0) -> None:
    """Raise InvalidSample unless every Sample invariant holds."""
    if not (0.0 < s.frequency <= max_frequency):
        raise InvalidSample(f"{s.id}: frequency {s.frequency} outside (0, {max_frequency}]")
    if not (s.norm_p > 0 and s.norm_v > 0):
        raise InvalidSample(f"{s.id}: normalization scalars must be positive")
    for name, f in (("v_src", s.v_src), ("p_holo", s.p_holo)):
        m = f.max_modulus()
        if abs(m - 1.0) > 1e-12:
            raise InvalidSample(f"{s.id}: {name} max modulus {m} != 1")
    if (s.mask.rows, s.mask.cols) != (s.v_src.rows, s.v_src.cols):
        raise InvalidSample(f"{s.id}: mask shape differs from source grid")


@dataclass
class Dataset:
    samples: list
    split: dict              # sample id -> "train" | "val" | "test"
    manifest: dict           # provenance: seed, generator, config echo, warnings

    def ids(self, split: str | None = None) -> list:
        if split is None:
            return [s.id for s in self.samples]
        return [s.id for s in self.samples if self.split[s.id] == split]

    def subset(self, split: str) -> list:
        return [s for s in self.samples if self.split[s.id] == split]

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


def normalize_sample(raw_v: ComplexField, raw_p: ComplexField):
    """Divide each field by its own max modulus.

    Returns (v_norm, p_norm, norm_p, norm_v); multiplying the normalized
    fields back by their scalars reproduces the inputs to 1e-12 relative.
    """
    norm_v = raw_v.max_modulus()
    norm_p = raw_p.max_modulus()
    if norm_v == 0.0:
        raise DegenerateField("velocity field is identically zero")
    if norm_p == 0.0:
        raise DegenerateField("pressure field is identically zero")
    v = field_from_array(raw_v.values / norm_v, raw_v.quantity)
    p = field_from_array(raw_p.values / norm_p, raw_p.quantity)
    return v, p, norm_p, norm_v


def denormalize(f: ComplexField, scale: float) -> ComplexField:
    return field_from_array(f.values * scale, f.quantity)


# ---------------------------------------------------------------------------
# NAHT tensor container
#
# Layout: magic "NAHT", u8 version=1, u8 quantity tag, u16 reserved=0,
# u32 rows, u32 cols, 32-byte sha256 of the payload, then rows*cols
# little-endian (re, im) float64 pairs. Header is 48 bytes. The mask
# container "NAHM" shares the header with a payload of rows*cols u8 bits.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sBBHII32s")
_MAX_CELLS = 1 << 26  # 64M entries ~ 1 GiB of complex payload

MAGIC_TENSOR = b"NAHT"
MAGIC_MASK = b"NAHM"


def _payload_hash(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def _pack_container(magic: bytes, qtag: int, rows: int, cols: int,
                    payload: bytes) -> bytes:
    header = _HEADER.pack(magic, 1, qtag, 0, rows, cols, _payload_hash(payload))
    return header + payload


def _unpack_container(blob: bytes, magic: bytes, item_size: int, where="blob"):
    """Parse one container from the head of blob.

    Returns (qtag, rows, cols, payload, consumed). Trailing bytes beyond the
    declared payload are an error only when exact=True paths check consumed.
    """
    if len(blob) < _HEADER.size or blob[:4] != magic:
        raise BadMagic(f"{where}: not a {magic.decode()} container")
    _magic, version, qtag, _res, rows, cols, digest = _HEADER.unpack_from(blob)
    if version != 1:
        raise BadMagic(f"{where}: unsupported version {version}")
    if rows * cols > _MAX_CELLS:
        raise ShapeOverflow(f"{where}: declared shape {rows}x{cols} too large")
    expected = rows * cols * item_size
    payload = blob[_HEADER.size:_HEADER.size + expected]
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{where}: payload {len(payload)} bytes, expected {expected}"
        )
    if _payload_hash(payload) != digest:
        raise CorruptPayload(f"{where}: payload hash mismatch")
    return qtag, rows, cols, payload, _HEADER.size + expected


def _write_container(path, magic: bytes, qtag: int, rows: int, cols: int,
                     payload: bytes) -> None:
    Path(path).write_bytes(_pack_container(magic, qtag, rows, cols, payload))


def _read_container(path, magic: bytes, item_size: int):
    blob = Path(path).read_bytes()
    qtag, rows, cols, payload, consumed = _unpack_container(
        blob, magic, item_size, where=str(path))
    if consumed != len(blob):
        raise TruncatedPayload(f"{path}: {len(blob) - consumed} trailing bytes")
    return qtag, rows, cols, payload


def array_to_blob(arr2d: np.ndarray, qtag: int = 0) -> bytes:
    """Serialize a 2-D complex array to an in-memory NAHT blob."""
    arr = np.ascontiguousarray(arr2d, dtype=np.complex128)
    if arr.ndim != 2:
        raise ValueError("array_to_blob expects a 2-D array")
    return _pack_container(MAGIC_TENSOR, qtag, arr.shape[0], arr.shape[1],
                           arr.tobytes())


def array_from_blob(blob: bytes, where="blob"):
    """Parse one NAHT blob; returns (array, qtag, bytes consumed)."""
    qtag, rows, cols, payload, consumed = _unpack_container(
        blob, MAGIC_TENSOR, 16, where=where)
    arr = np.frombuffer(payload, dtype=np.complex128).reshape(rows, cols).copy()
    return arr, qtag, consumed


def write_array(path, arr2d: np.ndarray, qtag: int = 0) -> None:
    """Write a raw 2-D complex array; qtag 0 marks an untyped tensor."""
    arr = np.ascontiguousarray(arr2d, dtype=np.complex128)
    if arr.ndim != 2:
        raise ValueError("write_array expects a 2-D array")
    _write_container(path, MAGIC_TENSOR, qtag, arr.shape[0], arr.shape[1],
                     arr.tobytes())


def read_array(path):
    """Read a raw 2-D complex array; returns (array, quantity tag)."""
    qtag, rows, cols, payload = _read_container(path, MAGIC_TENSOR, 16)
    arr = np.frombuffer(payload, dtype=np.complex128).reshape(rows, cols).copy()
    return arr, qtag


def write_tensor(path, f: ComplexField) -> None:
    write_array(path, f.values, int(f.quantity))


def read_tensor(path) -> ComplexField:
    arr, qtag = read_array(path)
    try:
        quantity = Quantity(qtag)
    except ValueError:
        raise BadMagic(f"{path}: quantity tag {qtag} is not a field quantity")
    return field_from_array(arr, quantity)


def write_mask(path, m: BinaryMask) -> None:
    _write_container(path, MAGIC_MASK, 0, m.rows, m.cols, m.bits.tobytes())


def read_mask(path) -> BinaryMask:
    _, rows, cols, payload = _read_container(path, MAGIC_MASK, 1)
    bits = np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols).copy()
    return BinaryMask(rows, cols, bits)


# ---------------------------------------------------------------------------
# Dataset directory: manifest.json plus <id>.p.naht / <id>.v.naht / <id>.mask
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "nahlab-dataset-v1"


def write_dataset(dirpath, ds: Dataset) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        write_tensor(d / f"{s.id}.p.naht", s.p_holo)
        write_tensor(d / f"{s.id}.v.naht", s.v_src)
        write_mask(d / f"{s.id}.mask", s.mask)
        entries.append({
            "id": s.id,
            "frequency": s.frequency,
            "mode_index": s.mode_index,
            "family": s.family.value,
            "split": ds.split[s.id],
            "norm_p": s.norm_p,
            "norm_v": s.norm_v,
        })
    manifest = dict(ds.manifest)
    manifest["format"] = DATASET_FORMAT
    manifest["samples"] = entries
    (d / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )


def read_dataset(dirpath) -> Dataset:
    d = Path(dirpath)
    mpath = d / MANIFEST_NAME
    if not mpath.exists():
        raise InconsistentManifest(f"{dirpath}: no {MANIFEST_NAME}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise InconsistentManifest(f"{dirpath}: unknown format {manifest.get('format')}")
    samples, split = [], {}
    for e in manifest["samples"]:
        sid = e["id"]
        try:
            p = read_tensor(d / f"{sid}.p.naht")
            v = read_tensor(d / f"{sid}.v.naht")
            mask = read_mask(d / f"{sid}.mask")
        except (NahError, OSError) as err:
            raise InconsistentManifest(f"sample {sid}: {err}") from err
        if p.quantity is not Quantity.Pressure or v.quantity is not Quantity.NormalVelocity:
            raise InconsistentManifest(f"sample {sid}: quantity tags swapped")
        s = Sample(
            id=sid, frequency=float(e["frequency"]),
            mode_index=int(e["mode_index"]), v_src=v, p_holo=p, mask=mask,
            norm_p=float(e["norm_p"]), norm_v=float(e["norm_v"]),
            family=Family(e["family"]),
        )
        validate_sample(s)
        samples.append(s)
        split[sid] = e["split"]
    meta = {k: v for k, v in manifest.items() if k not in ("samples", "format")}
    return Dataset(samples=samples, split=split, manifest=meta)


def assign_splits(ids, rng) -> dict:
    """8:1:1 train/val/test assignment, exact to within one sample."""
    ids = list(ids)
    n = len(ids)
    order = rng.permutation(n)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    n_val = min(n_val, n - n_train)
    split = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            split[ids[idx]] = "train"
        elif pos < n_train + n_val:
            split[ids[idx]] = "val"
        else:
            split[ids[idx]] = "test"
    return split
