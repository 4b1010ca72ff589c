"""Single-decoder complex-valued U-Net mapping hologram pressure to source
velocity, plus the trainable physical-scale factor.

Default shape plan (8x8 pressure in, 16x64 velocity out):

    encoder    1@8x8 -> conv3x3 -> 16@8x8 (e0) -> s2 -> 32@4x4 (e1) -> s2 -> 64@2x2
    bottleneck 64@2x2 -> conv3x3 -> 64@2x2
    decoder    up(2,2) -> 32@4x4 [skip e1] -> up(2,4) -> 16@8x16 -> up(2,4)
               -> 16@16x64 -> conv3x3 -> 1@16x64 (linear)

Skip concatenation happens only where encoder and decoder spatial shapes
match (here the 4x4 stage; e0 at 8x8 has no 8x8 decoder counterpart). Every
activation is the cardioid; the final projection is linear so the output is
not confined to the right half plane.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import ComplexField, NahError, array_from_blob, array_to_blob
from .propagate import Propagator


class IncompatibleCheckpoint(NahError):
    """Checkpoint architecture does not match the receiving network."""


@dataclass(frozen=True)
class ModelConfig:
    in_rows: int = 8
    in_cols: int = 8
    out_rows: int = 16
    out_cols: int = 64
    enc_widths: tuple = (16, 32, 64)
    dec_widths: tuple = (32, 16, 16)
    dec_strides: tuple = ((2, 2), (2, 4), (2, 4))
    kernel: int = 3
    upsample: str = "transposed"      # "transposed" | "nearest"

    def __post_init__(self):
        if self.upsample not in ("transposed", "nearest"):
            raise ValueError("upsample must be 'transposed' or 'nearest'")
        if len(self.dec_widths) != len(self.dec_strides):
            raise ValueError("dec_widths and dec_strides must pair up")
        r, c = self.bottleneck_shape()
        for sh, sw in self.dec_strides:
            r, c = r * sh, c * sw
        if (r, c) != (self.out_rows, self.out_cols):
            raise ValueError(
                f"decoder strides produce {r}x{c}, expected "
                f"{self.out_rows}x{self.out_cols}"
            )

    def bottleneck_shape(self):
        r, c = self.in_rows, self.in_cols
        for _ in self.enc_widths[1:]:
            r, c = (r + 1) // 2, (c + 1) // 2
        return r, c

    def to_dict(self):
        return {
            "in_rows": self.in_rows, "in_cols": self.in_cols,
            "out_rows": self.out_rows, "out_cols": self.out_cols,
            "enc_widths": list(self.enc_widths),
            "dec_widths": list(self.dec_widths),
            "dec_strides": [list(s) for s in self.dec_strides],
            "kernel": self.kernel, "upsample": self.upsample,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            in_rows=int(d["in_rows"]), in_cols=int(d["in_cols"]),
            out_rows=int(d["out_rows"]), out_cols=int(d["out_cols"]),
            enc_widths=tuple(d["enc_widths"]),
            dec_widths=tuple(d["dec_widths"]),
            dec_strides=tuple(tuple(s) for s in d["dec_strides"]),
            kernel=int(d["kernel"]), upsample=d["upsample"],
        )


def _glorot(rng, shape, fan_in, kh, kw):
    std = np.sqrt(1.0 / (2.0 * fan_in * kh * kw))
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * std


class CvUnet:
    """Complex U-Net with named parameters held as autodiff leaves."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.params: dict = {}
        self._build(np.random.default_rng(self.seed))

    # -- construction -------------------------------------------------------

    def _add_conv(self, rng, name, cin, cout, k):
        self.params[f"{name}.w"] = ad.CTensor(
            _glorot(rng, (cout, cin, k, k), cin, k, k), requires_grad=True)
        self.params[f"{name}.b"] = ad.CTensor(
            np.zeros(cout, dtype=np.complex128), requires_grad=True)

    def _add_upconv(self, rng, name, cin, cout, stride):
        sh, sw = stride
        self.params[f"{name}.w"] = ad.CTensor(
            _glorot(rng, (cin, cout, sh, sw), cin, sh, sw), requires_grad=True)
        self.params[f"{name}.b"] = ad.CTensor(
            np.zeros(cout, dtype=np.complex128), requires_grad=True)

    def _build(self, rng):
        cfg = self.config
        k = cfg.kernel
        cin = 1
        for i, cout in enumerate(cfg.enc_widths):
            self._add_conv(rng, f"enc{i}", cin, cout, k)
            cin = cout
        self._add_conv(rng, "bottleneck", cin, cin, k)

        # decoder bookkeeping mirrors forward(): track spatial shapes to know
        # where skips land and how many channels each stage sees
        shapes = self._encoder_shapes()
        r, c = cfg.bottleneck_shape()
        for i, (cout, stride) in enumerate(zip(cfg.dec_widths, cfg.dec_strides)):
            last = i == len(cfg.dec_widths) - 1
            if cfg.upsample == "transposed":
                self._add_upconv(rng, f"dec{i}.up", cin, cout, stride)
            else:
                self._add_conv(rng, f"dec{i}.up", cin, cout, k)
            r, c = r * stride[0], c * stride[1]
            cur = cout
            if not last:
                if (r, c) in shapes:
                    cur += shapes[(r, c)]
                self._add_conv(rng, f"dec{i}.conv", cur, cout, k)
            cin = cout
        self._add_conv(rng, "out", cin, 1, k)

    def _encoder_shapes(self):
        """Spatial shape -> channel width for encoder features eligible as
        skip inputs (all stages before the bottleneck input)."""
        cfg = self.config
        shapes = {}
        r, c = cfg.in_rows, cfg.in_cols
        for i, w in enumerate(cfg.enc_widths[:-1]):
            if i > 0:
                r, c = (r + 1) // 2, (c + 1) // 2
            shapes[(r, c)] = w
        return shapes

    # -- forward ------------------------------------------------------------

    def forward(self, p) -> ad.CTensor:
        """Map hologram pressure (rows x cols) to a (1, out_rows, out_cols)
        velocity estimate. Accepts ComplexField, ndarray, or CTensor."""
        cfg = self.config
        x = self._coerce_input(p)
        k = cfg.kernel
        pad = (k // 2, k // 2)

        feats = {}
        for i in range(len(cfg.enc_widths)):
            stride = (1, 1) if i == 0 else (2, 2)
            x = ad.conv2d(x, self.params[f"enc{i}.w"], self.params[f"enc{i}.b"],
                          stride=stride, padding=pad)
            x = ad.cardioid(x)
            if i < len(cfg.enc_widths) - 1:
                feats[x.shape[1:]] = x
        x = ad.cardioid(ad.conv2d(x, self.params["bottleneck.w"],
                                  self.params["bottleneck.b"], padding=pad))

        for i, stride in enumerate(cfg.dec_strides):
            last = i == len(cfg.dec_strides) - 1
            if cfg.upsample == "transposed":
                x = ad.upconv2d(x, self.params[f"dec{i}.up.w"],
                                self.params[f"dec{i}.up.b"], stride)
            else:
                x = ad.upsample_nearest(x, stride)
                x = ad.conv2d(x, self.params[f"dec{i}.up.w"],
                              self.params[f"dec{i}.up.b"], padding=pad)
            x = ad.cardioid(x)
            if not last:
                skip = feats.get(x.shape[1:])
                if skip is not None:
                    x = ad.concat([x, skip], axis=0)
                x = ad.cardioid(ad.conv2d(x, self.params[f"dec{i}.conv.w"],
                                          self.params[f"dec{i}.conv.b"],
                                          padding=pad))
        return ad.conv2d(x, self.params["out.w"], self.params["out.b"], padding=pad)

    def _coerce_input(self, p) -> ad.CTensor:
        cfg = self.config
        if isinstance(p, ComplexField):
            arr = p.values
        elif isinstance(p, ad.CTensor):
            return p
        else:
            arr = np.asarray(p, dtype=np.complex128)
        if arr.shape != (cfg.in_rows, cfg.in_cols):
            raise ValueError(
                f"input shape {arr.shape}, expected ({cfg.in_rows}, {cfg.in_cols})"
            )
        return ad.CTensor(arr.reshape(1, cfg.in_rows, cfg.in_cols))

    # -- parameter plumbing --------------------------------------------------

    def parameters(self):
        return list(self.params.items())

    def param_count(self) -> int:
        return sum(int(np.prod(t.values.shape)) for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "CvUnet":
        other = CvUnet(self.config, seed=self.seed)
        other.load_state(self.state_dict())
        return other

    def state_dict(self):
        return {name: t.values.copy() for name, t in self.params.items()}

    def load_state(self, state):
        if set(state) != set(self.params):
            raise IncompatibleCheckpoint("parameter names differ")
        for name, arr in state.items():
            if arr.shape != self.params[name].values.shape:
                raise IncompatibleCheckpoint(f"shape mismatch for {name}")
            self.params[name].values = np.array(arr, dtype=np.complex128)


@dataclass
class ScaleFactor:
    """Trainable complex factor restoring the physical velocity scale."""

    c: ad.CTensor

    @property
    def value(self) -> complex:
        return complex(self.c.values.reshape(()))


def fit_scale(vhat_values: np.ndarray, p_meas: ComplexField, prop: Propagator) -> complex:
    """Least-squares complex fit C = <P vhat, p> / <P vhat, P vhat>.

    Falls back to 1 when the predicted field carries no energy.
    """
    y = prop.matrix @ np.asarray(vhat_values, dtype=np.complex128).reshape(-1)
    denom = np.vdot(y, y)
    if abs(denom) < 1e-30:
        return 1.0 + 0.0j
    c = np.vdot(y, p_meas.vector) / denom
    if c == 0:
        return 1.0 + 0.0j
    return complex(c)


def init_scale(net: CvUnet, p_meas: ComplexField, prop: Propagator) -> ScaleFactor:
    """Initialize the scale factor from the network's own prediction for a
    physical-scale measured pressure."""
    m = p_meas.max_modulus()
    p_norm = p_meas.values / m if m > 0 else p_meas.values
    vhat = net.forward(p_norm).values
    c0 = fit_scale(vhat, p_meas, prop)
    return ScaleFactor(ad.CTensor(np.array(c0, dtype=np.complex128),
                                  requires_grad=True))


# ---------------------------------------------------------------------------
# checkpoints: magic "NAHC", u32 json length, json header, then one NAHT blob
# per parameter (2-D flattened; true shapes live in the header manifest)
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"NAHC"
CHECKPOINT_FORMAT = "nahlab-checkpoint-v1"


def _flat2d(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr.reshape(arr.shape[0], -1)


def save_weights(path, net: CvUnet, scale: ScaleFactor | None = None) -> None:
    names = list(net.params.keys())
    header = {
        "format": CHECKPOINT_FORMAT,
        "arch": net.config.to_dict(),
        "seed": net.seed,
        "params": [{"name": n, "shape": list(net.params[n].values.shape)}
                   for n in names],
        "has_scale": scale is not None,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    chunks = [_CKPT_MAGIC, struct.pack("<I", len(hb)), hb]
    arrays = [net.params[n].values for n in names]
    if scale is not None:
        arrays.append(scale.c.values)
    for arr in arrays:
        chunks.append(array_to_blob(_flat2d(arr)))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_weights(path, net: CvUnet) -> ScaleFactor | None:
    """Load a checkpoint into net; returns the stored scale factor if any.

    Raises IncompatibleCheckpoint when the architectures differ.
    """
    header, arrays = _read_checkpoint(path)
    if header["arch"] != net.config.to_dict():
        raise IncompatibleCheckpoint("architecture config differs from checkpoint")
    state = {}
    for meta, arr in zip(header["params"], arrays):
        state[meta["name"]] = arr.reshape(tuple(meta["shape"]))
    net.load_state(state)
    if header["has_scale"]:
        c = arrays[-1].reshape(())
        return ScaleFactor(ad.CTensor(np.array(c), requires_grad=True))
    return None


def load_checkpoint(path) -> tuple:
    """Construct a fresh network from a checkpoint; returns (net, scale|None)."""
    header, _arrays = _read_checkpoint(path)
    net = CvUnet(ModelConfig.from_dict(header["arch"]), seed=header["seed"])
    scale = load_weights(path, net)
    return net, scale


def _read_checkpoint(path):
    blob = open(path, "rb").read()
    if blob[:4] != _CKPT_MAGIC:
        raise IncompatibleCheckpoint(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen].decode())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"{path}: unknown checkpoint format")
    n_blobs = len(header["params"]) + (1 if header["has_scale"] else 0)
    offset = 8 + hlen
    arrays = []
    for _ in range(n_blobs):
        arr, _qtag, consumed = array_from_blob(blob[offset:], where=str(path))
        arrays.append(arr)
        offset += consumed
    return header, arrays
