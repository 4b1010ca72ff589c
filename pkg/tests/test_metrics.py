import numpy as np
import pytest

from nahlab.core import BinaryMask, Quantity, field_from_array, full_mask
from nahlab.metrics import (
    NMSE_FLOOR_DB, EvalRecord, ZeroReference, cumulative, ncc, nmse,
    normalized_comparison, read_records, render_summary, success_histogram,
    summary_table, write_records,
)


def cf(arr):
    return field_from_array(np.asarray(arr, dtype=complex),
                            Quantity.NormalVelocity)


# ---------------------------------------------------------------------------
# nmse
# ---------------------------------------------------------------------------

def test_nmse_exact_match_hits_floor(rng):
    x = cf(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    assert nmse(x, x) == NMSE_FLOOR_DB


def test_nmse_zero_estimate_is_zero_db(rng):
    x = cf(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    zero = cf(np.zeros((4, 4)))
    assert nmse(zero, x) == pytest.approx(0.0, abs=1e-12)


def test_nmse_double_estimate_is_zero_db(rng):
    x = cf(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    double = cf(2.0 * x.values)
    assert nmse(double, x) == pytest.approx(0.0, abs=1e-12)


def test_nmse_zero_reference_raises():
    with pytest.raises(ZeroReference):
        nmse(cf(np.ones((2, 2))), cf(np.zeros((2, 2))))


def test_nmse_masked(rng):
    x = cf(np.ones((2, 2)))
    xh = cf([[1.0, 99.0], [1.0, 1.0]])
    bits = np.array([[1, 0], [1, 1]], dtype=np.uint8)
    assert nmse(xh, x, BinaryMask(2, 2, bits)) == NMSE_FLOOR_DB


def test_nmse_permutation_invariance(rng):
    x = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    e = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    perm = rng.permutation(16)
    a = nmse(cf((x + e).reshape(4, 4)), cf(x.reshape(4, 4)))
    b = nmse(cf((x + e)[perm].reshape(4, 4)), cf(x[perm].reshape(4, 4)))
    assert a == pytest.approx(b, rel=1e-12)


# ---------------------------------------------------------------------------
# ncc
# ---------------------------------------------------------------------------

def test_ncc_perfect_and_scaled(rng):
    x = cf(rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5)))
    assert ncc(x, x) == pytest.approx(1.0)
    for alpha in (2.0, -3.0, 0.5 + 2.0j):
        scaled = cf(alpha * x.values)
        assert ncc(scaled, x) == pytest.approx(1.0)


def test_ncc_global_phase_invariance(rng):
    x = cf(rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5)))
    for phi in (0.3, 1.2, np.pi):
        rotated = cf(np.exp(1j * phi) * x.values)
        assert ncc(rotated, x) == pytest.approx(1.0)


def test_ncc_orthogonal_is_zero():
    a = np.zeros((2, 2), dtype=complex)
    b = np.zeros((2, 2), dtype=complex)
    a[0, 0] = 1.0
    b[1, 1] = 1.0
    assert ncc(cf(a), cf(b)) == 0.0


def test_ncc_real_convention():
    x = cf(np.ones((2, 2)))
    rotated = cf(1j * np.ones((2, 2)))
    assert ncc(rotated, x, convention="real") == pytest.approx(0.0)
    assert ncc(rotated, x, convention="modulus") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ncc(x, x, convention="imag")


def test_ncc_zero_vector_raises():
    with pytest.raises(ZeroReference):
        ncc(cf(np.zeros((2, 2))), cf(np.ones((2, 2))))


def test_normalized_comparison_magnitude_free_phase_sensitive(rng):
    x = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    noisy = x + 0.1
    n1, c1 = normalized_comparison(cf(noisy), cf(x))
    # positive rescaling is invisible after unit-max normalization
    n2, c2 = normalized_comparison(cf(7.3 * noisy), cf(x))
    assert n1 == pytest.approx(n2, rel=1e-10)
    assert c1 == pytest.approx(c2, rel=1e-12)
    # a global phase penalizes the error energy but not the correlation
    n3, c3 = normalized_comparison(cf(1j * noisy), cf(x))
    assert n3 > n1
    assert c3 == pytest.approx(c1, rel=1e-12)


# ---------------------------------------------------------------------------
# cumulative
# ---------------------------------------------------------------------------

def test_cumulative_ascending():
    pts = cumulative([1.0, 2.0, 3.0])
    assert pts == [(1.0, 1 / 3), (2.0, 2 / 3), (3.0, 1.0)]


def test_cumulative_singleton():
    assert cumulative([5.0]) == [(5.0, 1.0)]


def test_cumulative_descending_starts_at_worst():
    pts = cumulative([-5.0, -1.0, -3.0], descending=True)
    assert pts[0][0] == -1.0
    assert pts[-1] == (-5.0, 1.0)
    probs = [p for _, p in pts]
    assert probs == sorted(probs) and probs[-1] == 1.0


def test_cumulative_empty_raises():
    with pytest.raises(ValueError):
        cumulative([])


# ---------------------------------------------------------------------------
# records, histogram, summary
# ---------------------------------------------------------------------------

def rec(method, nmse_db, ncc_val, mode_index=1, sid="s0"):
    return EvalRecord(sample_id=sid, family="MaskedOOD", mode_index=mode_index,
                      frequency=440.0, method=method, nmse_db=nmse_db,
                      ncc=ncc_val)


def test_success_thresholds():
    assert rec("finetuned", -4.0, 0.8).successful()
    assert not rec("finetuned", -2.0, 0.8).successful()
    assert not rec("finetuned", -4.0, 0.7).successful()


def test_success_histogram_counts():
    records = [
        rec("finetuned", -4.0, 0.8, mode_index=1),
        rec("finetuned", -5.0, 0.9, mode_index=1, sid="s1"),
        rec("finetuned", -2.0, 0.8, mode_index=2, sid="s2"),
        rec("cesm", -3.5, 0.76, mode_index=2, sid="s3"),
    ]
    hist = success_histogram(records)
    assert hist["finetuned"] == {1: 2}
    assert hist["cesm"] == {2: 1}


def test_success_histogram_empty():
    assert success_histogram([]) == {}
    hist = success_histogram([rec("finetuned", -1.0, 0.5)])
    assert hist == {"finetuned": {}}


def test_summary_single_record():
    stats = summary_table([rec("cesm", -2.5, 0.66)])
    assert stats["cesm"]["nmse_mean"] == pytest.approx(-2.5)
    assert stats["cesm"]["ncc_mean"] == pytest.approx(0.66)
    assert stats["cesm"]["count"] == 1


def test_summary_mean():
    records = [rec("cesm", 0.0, 0.5), rec("cesm", -2.0, 0.7, sid="s1")]
    stats = summary_table(records)
    assert stats["cesm"]["nmse_mean"] == pytest.approx(-1.0)
    assert stats["cesm"]["ncc_mean"] == pytest.approx(0.6)


def paper_fixture_records():
    """Two records per method whose means equal the published values."""
    vals = {
        "pretrained": (-0.33, 0.5452),
        "finetuned": (-1.76, 0.6066),
        "cesm": (-1.13, 0.6320),
    }
    records = []
    for method, (nm, cc) in vals.items():
        records.append(rec(method, nm + 0.25, cc - 0.01, sid=f"{method}-a"))
        records.append(rec(method, nm - 0.25, cc + 0.01, sid=f"{method}-b"))
    return records


def test_summary_renders_published_means():
    stats = summary_table(paper_fixture_records())
    table = render_summary(stats, runtime_labels={
        "pretrained": "4.09 h", "finetuned": "1.28 min per sample",
        "cesm": "-"})
    assert "pre-trained" in table and "fine-tuned" in table and "C-ESM" in table
    assert "-0.33" in table and "54.52%" in table
    assert "-1.76" in table and "60.66%" in table
    assert "-1.13" in table and "63.20%" in table
    assert "4.09 h" in table and "1.28 min per sample" in table
    # methods render in the fixed order
    assert table.index("pre-trained") < table.index("fine-tuned") < table.index("C-ESM")


def test_records_csv_roundtrip(tmp_path):
    records = paper_fixture_records()
    path = tmp_path / "records.csv"
    write_records(path, records)
    back = read_records(path)
    assert back == records


def test_records_csv_schema_guard(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("foo,bar\n1,2\n")
    with pytest.raises(ValueError):
        read_records(path)


def test_eval_record_validation():
    with pytest.raises(ValueError):
        rec("cesm", -1.0, 1.5)
    with pytest.raises(ValueError):
        rec("cesm", float("-inf"), 0.5)
