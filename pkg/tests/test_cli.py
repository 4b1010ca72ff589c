import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from nahlab import metrics as mt
from nahlab.cli import main
from nahlab.core import read_dataset


def dir_hash(path):
    h = hashlib.sha256()
    for f in sorted(Path(path).rglob("*")):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def rect_ds(workdir):
    out = workdir / "rect"
    assert main(["gen-data", "--family", "rect", "--count", "14",
                 "--seed", "5", "-o", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def ood_ds(workdir):
    out = workdir / "ood"
    assert main(["gen-data", "--family", "ood", "--count", "3",
                 "--seed", "9", "-o", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(workdir, rect_ds):
    out = workdir / "pre"
    rc = main(["pretrain", "--dataset", str(rect_ds), "--seed", "0",
               "--epochs", "4", "-o", str(out)])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_split_and_artifacts(rect_ds):
    ds = read_dataset(rect_ds)
    assert len(ds.samples) == 14
    counts = {s: sum(1 for v in ds.split.values() if v == s)
              for s in ("train", "val", "test")}
    assert counts["train"] == 11 and counts["val"] == 1 and counts["test"] == 2
    assert (rect_ds / "run_manifest.json").exists()


def test_gen_data_deterministic(workdir):
    a, b = workdir / "det-a", workdir / "det-b"
    for out in (a, b):
        assert main(["gen-data", "--family", "rect", "--count", "6",
                     "--seed", "77", "-o", str(out)]) == 0
    assert dir_hash(a) == dir_hash(b)


def test_gen_data_count_zero_is_config_error(workdir):
    assert main(["gen-data", "--family", "rect", "--count", "0",
                 "-o", str(workdir / "bad")]) == 2


def test_unknown_flag_is_config_error():
    assert main(["gen-data", "--nonsense"]) == 2


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def test_pretrain_smoke_writes_artifacts(workdir, rect_ds):
    """50-sample, 30-epoch-cap smoke run produces checkpoint and history."""
    big = workdir / "rect50"
    assert main(["gen-data", "--family", "rect", "--count", "50",
                 "--seed", "6", "-o", str(big)]) == 0
    out = workdir / "pre-smoke"
    assert main(["pretrain", "--dataset", str(big), "--seed", "1",
                 "--epochs", "30", "-o", str(out)]) == 0
    assert (out / "checkpoint.nahc").exists()
    history = (out / "history.csv").read_text().strip().splitlines()
    assert history[0].startswith("epoch,")
    assert 2 <= len(history) <= 31


def test_pretrain_missing_dataset_exit_2(workdir):
    assert main(["pretrain", "--dataset", str(workdir / "nope"),
                 "-o", str(workdir / "x")]) == 2


def test_pretrain_resume_reproduces_next_epoch_loss(workdir, rect_ds):
    full = workdir / "pre-full"
    assert main(["pretrain", "--dataset", str(rect_ds), "--seed", "3",
                 "--epochs", "5", "-o", str(full)]) == 0
    part = workdir / "pre-part"
    assert main(["pretrain", "--dataset", str(rect_ds), "--seed", "3",
                 "--epochs", "3", "-o", str(part)]) == 0
    resumed = workdir / "pre-resumed"
    assert main(["pretrain", "--dataset", str(rect_ds), "--seed", "3",
                 "--epochs", "5", "--resume", str(part),
                 "-o", str(resumed)]) == 0

    def losses(p):
        rows = (p / "history.csv").read_text().strip().splitlines()[1:]
        return [(r.split(",")[0], r.split(",")[1], r.split(",")[3]) for r in rows]

    assert losses(part) + losses(resumed) == losses(full)


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------

def test_finetune_produces_records_and_histories(workdir, ood_ds, pretrained):
    out = workdir / "ft"
    rc = main(["finetune", "--dataset", str(ood_ds),
               "--checkpoint", str(pretrained / "checkpoint.nahc"),
               "--samples", "2", "--epochs", "5", "-o", str(out)])
    assert rc == 0
    records = mt.read_records(out / "records.csv")
    assert len(records) == 2
    assert all(r.method == "finetuned" for r in records)
    hist = sorted((out / "histories").glob("*.csv"))
    assert len(hist) == 2


def test_finetune_random_init_tag(workdir, ood_ds, pretrained):
    out = workdir / "ft-rand"
    rc = main(["finetune", "--dataset", str(ood_ds),
               "--checkpoint", str(pretrained / "checkpoint.nahc"),
               "--samples", "1", "--epochs", "3", "--random-init",
               "-o", str(out)])
    assert rc == 0
    records = mt.read_records(out / "records.csv")
    assert records[0].method == "finetuned_random_init"


def test_finetune_zero_epochs_equals_pretrained_eval(workdir, ood_ds,
                                                     pretrained, config):
    """--epochs 0 must score exactly like direct evaluation of the
    pre-trained network (prediction = measurement-calibrated scale times the
    network output, with zero adaptation steps)."""
    out = workdir / "ft0"
    rc = main(["finetune", "--dataset", str(ood_ds),
               "--checkpoint", str(pretrained / "checkpoint.nahc"),
               "--samples", "2", "--epochs", "0", "-o", str(out)])
    assert rc == 0
    records = mt.read_records(out / "records.csv")

    from nahlab.cli import evaluate_network
    from nahlab.model import load_checkpoint
    from nahlab.propagate import PropagatorCache
    net, _ = load_checkpoint(pretrained / "checkpoint.nahc")
    ds = read_dataset(ood_ds)
    cache = PropagatorCache(config)
    for rec in records:
        s = ds.by_id(rec.sample_id)
        direct = evaluate_network(net, s, cache.at(s.omega), "pretrained")
        assert rec.nmse_db == pytest.approx(direct.nmse_db, rel=1e-9)
        assert rec.ncc == pytest.approx(direct.ncc, rel=1e-9)


def test_finetune_jobs_parallel_matches_serial(workdir, ood_ds, pretrained):
    serial = workdir / "ft-serial"
    parallel = workdir / "ft-par"
    for out, jobs in ((serial, "1"), (parallel, "2")):
        rc = main(["finetune", "--dataset", str(ood_ds),
                   "--checkpoint", str(pretrained / "checkpoint.nahc"),
                   "--samples", "2", "--epochs", "4", "--jobs", jobs,
                   "-o", str(out)])
        assert rc == 0
    rs = mt.read_records(serial / "records.csv")
    rp = mt.read_records(parallel / "records.csv")
    assert [(r.sample_id, r.nmse_db, r.ncc) for r in rs] == \
           [(r.sample_id, r.nmse_db, r.ncc) for r in rp]


# ---------------------------------------------------------------------------
# cesm / eval / report
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cesm_out(workdir, ood_ds):
    out = workdir / "cesm"
    rc = main(["cesm", "--dataset", str(ood_ds), "--samples", "2",
               "-o", str(out)])
    assert rc == 0
    return out


def test_cesm_records_and_lambda_report(cesm_out):
    records = mt.read_records(cesm_out / "records.csv")
    assert len(records) == 2
    assert all(r.method == "cesm" for r in records)
    report = json.loads((cesm_out / "lambda_report.json").read_text())
    for sid, entry in report.items():
        maes = {lam: m for lam, m in entry["mae_table"]}
        assert entry["lambda_chosen"] in maes
        assert maes[entry["lambda_chosen"]] == min(maes.values())


def test_eval_merges_and_rejects_schema_mismatch(workdir, cesm_out, ood_ds,
                                                 pretrained):
    ft = workdir / "ft"
    out = workdir / "merged"
    rc = main(["eval", str(ft / "records.csv"), str(cesm_out / "records.csv"),
               "-o", str(out)])
    assert rc == 0
    merged = mt.read_records(out / "records.csv")
    assert {r.method for r in merged} == {"finetuned", "cesm"}

    bad = workdir / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["eval", str(bad), "-o", str(workdir / "m2")]) == 2


def test_eval_rejects_duplicates(workdir, cesm_out):
    out = workdir / "dup"
    assert main(["eval", str(cesm_out / "records.csv"),
                 str(cesm_out / "records.csv"), "-o", str(out)]) == 2


@pytest.fixture(scope="module")
def fixture_records(workdir):
    """Record set whose per-method means equal the published table values."""
    vals = {
        "pretrained": (-0.33, 0.5452),
        "finetuned": (-1.76, 0.6066),
        "cesm": (-1.13, 0.6320),
    }
    records = []
    for method, (nm, cc) in vals.items():
        for k, (dn, dc) in enumerate(((0.5, -0.004), (-0.5, 0.004))):
            records.append(mt.EvalRecord(
                sample_id=f"{method}-{k}", family="MaskedOOD",
                mode_index=k + 1, frequency=300.0 + k, method=method,
                nmse_db=nm + dn, ncc=cc + dc))
    path = workdir / "fixture.csv"
    mt.write_records(path, records)
    return path


def test_report_renders_published_table(workdir, fixture_records):
    out = workdir / "report"
    rc = main(["report", "--records", str(fixture_records),
               "--runtime-label", "pretrained=4.09 h",
               "--runtime-label", "finetuned=1.28 min per sample",
               "--runtime-label", "cesm=-",
               "-o", str(out)])
    assert rc == 0
    table = (out / "summary.txt").read_text()
    for needle in ("pre-trained", "fine-tuned", "C-ESM", "-0.33", "54.52%",
                   "-1.76", "60.66%", "-1.13", "63.20%", "4.09 h",
                   "1.28 min per sample"):
        assert needle in table, f"missing {needle!r} in:\n{table}"


def test_report_cdfs_monotone_end_at_one(workdir, fixture_records):
    out = workdir / "report2"
    assert main(["report", "--records", str(fixture_records),
                 "-o", str(out)]) == 0
    for csv_path in out.glob("cdf_*.csv"):
        rows = csv_path.read_text().strip().splitlines()[1:]
        probs = [float(r.split(",")[1]) for r in rows]
        assert probs == sorted(probs)
        assert probs[-1] == 1.0
    # NMSE CDFs are accumulated in descending order
    for csv_path in out.glob("cdf_nmse_*.csv"):
        vals = [float(r.split(",")[0])
                for r in csv_path.read_text().strip().splitlines()[1:]]
        assert vals == sorted(vals, reverse=True)


def test_report_histogram_honors_thresholds(workdir):
    records = [
        mt.EvalRecord("a", "MaskedOOD", 1, 100.0, "finetuned", -4.0, 0.80),
        mt.EvalRecord("b", "MaskedOOD", 2, 110.0, "finetuned", -2.0, 0.80),
        mt.EvalRecord("c", "MaskedOOD", 3, 120.0, "finetuned", -4.0, 0.70),
    ]
    path = workdir / "hrecords.csv"
    mt.write_records(path, records)
    out = workdir / "report3"
    assert main(["report", "--records", str(path), "-o", str(out)]) == 0
    rows = (out / "hist_success.csv").read_text().strip().splitlines()[1:]
    assert rows == ["finetuned,1,1"]


def test_report_empty_records_is_config_error(workdir):
    path = workdir / "empty.csv"
    mt.write_records(path, [])
    assert main(["report", "--records", str(path),
                 "-o", str(workdir / "r4")]) == 2
