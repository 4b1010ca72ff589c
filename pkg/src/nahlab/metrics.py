"""Evaluation: NMSE, NCC, masked variants, cumulative distributions,
successful-mode histograms, and the summary table.

Both metrics run on the column-vector view of the masked entries. NCC is
reported as the modulus of the complex correlation, making it invariant to a
global phase (a config switch selects the real-part convention instead).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import BinaryMask, ComplexField, NahError

NMSE_FLOOR_DB = -120.0
SUCCESS_NCC = 0.75
SUCCESS_NMSE_DB = -3.0


class ZeroReference(NahError):
    """Reference (or candidate, for NCC) field has no energy on the mask."""


def _masked_vectors(xhat: ComplexField, x: ComplexField, mask):
    if (xhat.rows, xhat.cols) != (x.rows, x.cols):
        raise ValueError("field shapes differ")
    if mask is None:
        return xhat.vector, x.vector
    if (mask.rows, mask.cols) != (x.rows, x.cols):
        raise ValueError("mask shape differs from fields")
    sel = mask.active.reshape(-1)
    return xhat.vector[sel], x.vector[sel]


def nmse(xhat: ComplexField, x: ComplexField, mask: BinaryMask | None = None) -> float:
    """10 log10(e^H e / x^H x) in dB over masked entries, floored at -120."""
    a, b = _masked_vectors(xhat, x, mask)
    ref = float(np.vdot(b, b).real)
    if ref == 0.0:
        raise ZeroReference("reference field is zero on the mask")
    e = a - b
    err = float(np.vdot(e, e).real)
    if err == 0.0:
        return NMSE_FLOOR_DB
    return max(float(10.0 * np.log10(err / ref)), NMSE_FLOOR_DB)


def ncc(xhat: ComplexField, x: ComplexField, mask: BinaryMask | None = None,
        convention: str = "modulus") -> float:
    """|xhat^H x| / (||xhat|| ||x||) over masked entries, in [0, 1].

    convention="real" keeps the real part of the correlation instead of the
    modulus (clipped below at 0).
    """
    a, b = _masked_vectors(xhat, x, mask)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroReference("zero vector in correlation")
    corr = np.vdot(a, b) / (na * nb)
    if convention == "modulus":
        return float(abs(corr))
    if convention == "real":
        return float(max(corr.real, 0.0))
    raise ValueError(f"unknown NCC convention {convention!r}")


def normalized_comparison(vhat: ComplexField, v_true: ComplexField,
                          mask: BinaryMask | None = None):
    """(nmse_db, ncc) after rescaling both fields to unit max modulus on the
    mask. Method outputs live on arbitrary physical scales; the rescale is
    what makes normalized-data comparisons meaningful."""
    a, b = _masked_vectors(vhat, v_true, mask)
    ma = float(np.max(np.abs(a)))
    mb = float(np.max(np.abs(b)))
    if ma == 0.0 or mb == 0.0:
        raise ZeroReference("zero field in normalized comparison")
    an, bn = a / ma, b / mb
    e = an - bn
    err = float(np.vdot(e, e).real)
    ref = float(np.vdot(bn, bn).real)
    nm = NMSE_FLOOR_DB if err == 0.0 else max(float(10.0 * np.log10(err / ref)),
                                              NMSE_FLOOR_DB)
    corr = abs(np.vdot(an, bn)) / (np.linalg.norm(an) * np.linalg.norm(bn))
    return nm, float(corr)


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    family: str
    mode_index: int
    frequency: float
    method: str        # pretrained | finetuned | finetuned_random_init | cesm
    nmse_db: float
    ncc: float
    runtime_s: float | None = None

    def __post_init__(self):
        for name in ("nmse_db", "ncc", "frequency"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.runtime_s is not None:
            object.__setattr__(self, "runtime_s", float(self.runtime_s))
        if not 0.0 <= self.ncc <= 1.0 + 1e-12:
            raise ValueError(f"ncc {self.ncc} outside [0, 1]")
        if not np.isfinite(self.nmse_db):
            raise ValueError("nmse must be finite (use the floor)")

    def successful(self) -> bool:
        return self.ncc > SUCCESS_NCC and self.nmse_db < SUCCESS_NMSE_DB


METHOD_LABELS = {
    "pretrained": "pre-trained",
    "finetuned": "fine-tuned",
    "finetuned_random_init": "fine-tuned (random init.)",
    "cesm": "C-ESM",
}


def record_for(sample, vhat: ComplexField, method: str,
               runtime_s: float | None = None) -> EvalRecord:
    """Score a velocity prediction against a sample's ground truth.

    Ground truth is consulted here, at evaluation time only; both fields are
    rescaled to unit max modulus on the sample mask before scoring.
    """
    nm, cc = normalized_comparison(vhat, sample.v_src, sample.mask)
    return EvalRecord(
        sample_id=sample.id, family=sample.family.value,
        mode_index=sample.mode_index, frequency=sample.frequency,
        method=method, nmse_db=nm, ncc=min(cc, 1.0), runtime_s=runtime_s)


def cumulative(values, descending: bool = False):
    """Empirical cumulative distribution as (value, probability) points.

    Ascending: P(X <= x) over sorted values. Descending (the plotting
    convention for error metrics): accumulation starts from the worst
    (highest) value, so the k-th point is (v_k, k/n) with v sorted high to
    low. Probabilities are non-decreasing and end at 1 either way.
    """
    vals = sorted(float(v) for v in values)
    if not vals:
        raise ValueError("cumulative() needs at least one value")
    n = len(vals)
    if descending:
        vals = vals[::-1]
    return [(v, (i + 1) / n) for i, v in enumerate(vals)]


def success_histogram(records) -> dict:
    """method -> {mode_index: count} over records passing both thresholds."""
    hist: dict = {}
    for r in records:
        per = hist.setdefault(r.method, {})
        if r.successful():
            per[r.mode_index] = per.get(r.mode_index, 0) + 1
    return hist


def summary_table(records) -> dict:
    """method -> {nmse_mean, ncc_mean, count, runtime_mean_s|None}."""
    groups: dict = {}
    for r in records:
        groups.setdefault(r.method, []).append(r)
    out = {}
    for method in sorted(groups, key=_method_order):
        rs = groups[method]
        runtimes = [r.runtime_s for r in rs if r.runtime_s is not None]
        out[method] = {
            "nmse_mean": float(np.mean([r.nmse_db for r in rs])),
            "ncc_mean": float(np.mean([r.ncc for r in rs])),
            "count": len(rs),
            "runtime_mean_s": float(np.mean(runtimes)) if runtimes else None,
        }
    return out


def _method_order(method):
    order = ["pretrained", "finetuned", "finetuned_random_init", "cesm"]
    return (order.index(method), method) if method in order else (len(order), method)


def render_summary(stats: dict, runtime_labels: dict | None = None) -> str:
    """Fixed-width table: mean NMSE (dB), mean NCC (%), runtime per method."""
    runtime_labels = runtime_labels or {}
    rows = [("", "NMSE", "NCC", "runtime")]
    for method, st in stats.items():
        label = METHOD_LABELS.get(method, method)
        rt = runtime_labels.get(method)
        if rt is None:
            rt = "-" if st["runtime_mean_s"] is None else \
                f"{st['runtime_mean_s']:.2f} s"
        rows.append((label, f"{st['nmse_mean']:.2f}",
                     f"{st['ncc_mean'] * 100:.2f}%", rt))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = []
    for i, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 6))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV schemas
# ---------------------------------------------------------------------------

RECORD_COLUMNS = ["sample_id", "family", "mode_index", "frequency", "method",
                  "nmse_db", "ncc", "runtime_s"]


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.family, r.mode_index, repr(r.frequency),
                        r.method, repr(r.nmse_db), repr(r.ncc),
                        "" if r.runtime_s is None else repr(r.runtime_s)])


def read_records(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RECORD_COLUMNS:
            raise ValueError(
                f"{path}: unexpected record schema {reader.fieldnames}")
        for row in reader:
            out.append(EvalRecord(
                sample_id=row["sample_id"], family=row["family"],
                mode_index=int(row["mode_index"]),
                frequency=float(row["frequency"]), method=row["method"],
                nmse_db=float(row["nmse_db"]), ncc=float(row["ncc"]),
                runtime_s=float(row["runtime_s"]) if row["runtime_s"] else None,
            ))
    return out


def write_cdf(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "cum_prob"])
        for v, p in points:
            w.writerow([repr(v), repr(p)])


def write_histogram(path, hist: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mode_index", "count"])
        for method in sorted(hist):
            for mode_index in sorted(hist[method]):
                w.writerow([method, mode_index, hist[method][mode_index]])
