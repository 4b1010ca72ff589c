"""Command-line orchestration of the experimental pipeline.

Commands: gen-data, pretrain, finetune, cesm, eval, report. Every command is
a pure function of its resolved configuration and input artifacts; each run
directory gets a run_manifest.json from which a re-run reproduces the outputs
bit-identically. Exit codes: 0 ok, 2 configuration error, 3 data generation
failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mt
from .cesm import EsmConfig, SolverFailure, cesm_solve
from .core import (
    Dataset, Family, NahConfig, NahError, read_dataset, write_dataset,
)
from .model import (
    CvUnet, IncompatibleCheckpoint, ModelConfig, load_checkpoint, save_weights,
)
from .propagate import PropagatorCache
from .sim import (
    BoundaryCondition, EigensolverError, EmptyModeSet, make_ood_family,
    rect_plate_sampler, synth_dataset,
)
from .train import (
    ConfigError, FinetuneConfig, FinetuneInput, NonFiniteGradient,
    PretrainConfig, finetune, load_trainer_state, predict, pretrain,
    save_trainer_state,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

OUT_ROOT_ENV = "NAHLAB_OUT"


# ---------------------------------------------------------------------------
# configuration file (INI) and run manifests
# ---------------------------------------------------------------------------

def load_run_config(path=None) -> dict:
    """Parse the INI config file into a plain nested dict of strings."""
    sections: dict = {}
    if path is None:
        return sections
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found")
    for section in parser.sections():
        sections[section] = dict(parser.items(section))
    return sections


def _section_get(cfg: dict, section: str, key: str, cast, default):
    try:
        return cast(cfg[section][key])
    except KeyError:
        return default
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from err


def nah_config_from(cfg: dict, overrides: dict | None = None) -> NahConfig:
    base = NahConfig()
    kwargs = {}
    for name, typ in (
        ("holo_rows", int), ("holo_cols", int), ("src_rows", int),
        ("src_cols", int), ("holo_pitch_x", float), ("holo_pitch_y", float),
        ("src_pitch_x", float), ("src_pitch_y", float), ("z_h", float),
        ("c", float), ("rho0", float), ("baffle_factor", float),
    ):
        kwargs[name] = _section_get(cfg, "geometry", name, typ,
                                    getattr(base, name))
    if overrides:
        kwargs.update(overrides)
    try:
        return NahConfig(**kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def esm_config_from(cfg: dict) -> EsmConfig:
    base = EsmConfig()
    lam = cfg.get("esm", {}).get("lambda_grid")
    grid = tuple(float(x) for x in lam.split(",")) if lam else base.lambda_grid
    try:
        return EsmConfig(
            retreat_distance=_section_get(cfg, "esm", "retreat_distance",
                                          float, base.retreat_distance),
            es_rows=_section_get(cfg, "esm", "es_rows", int, base.es_rows),
            es_cols=_section_get(cfg, "esm", "es_cols", int, base.es_cols),
            lambda_grid=grid,
            fista_iters=_section_get(cfg, "esm", "fista_iters", int,
                                     base.fista_iters),
            fista_tol=_section_get(cfg, "esm", "fista_tol", float,
                                   base.fista_tol),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV, ".")
    return Path(root) / default_name


def _write_run_manifest(outdir: Path, command: str, resolved: dict) -> None:
    manifest = {
        "tool": "nahlab",
        "version": __version__,
        "command": command,
        "resolved": resolved,
    }
    (outdir / "run_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    nah = nah_config_from(cfg)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    outdir = _out_dir(args, f"dataset-{args.family}-{args.seed}")
    outdir.mkdir(parents=True, exist_ok=True)
    if args.family == "rect":
        bcs = {
            "both": (BoundaryCondition.SimplySupported, BoundaryCondition.Clamped),
            "ss": (BoundaryCondition.SimplySupported,),
            "clamped": (BoundaryCondition.Clamped,),
        }[args.bc]
        ds = synth_dataset(nah, rect_plate_sampler(bcs), args.count, args.seed)
    else:
        ds = make_ood_family(nah, args.count, args.seed)
    write_dataset(outdir, ds)
    _write_run_manifest(outdir, "gen-data", {
        "family": args.family, "bc": args.bc, "count": args.count,
        "seed": args.seed, "geometry": nah.to_dict(),
    })
    counts = {s: sum(1 for i in ds.split.values() if i == s)
              for s in ("train", "val", "test")}
    print(f"wrote {len(ds.samples)} samples to {outdir} (split {counts})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def _pretrain_cfg(cfg: dict, args) -> PretrainConfig:
    base = PretrainConfig()
    return PretrainConfig(
        lr0=_section_get(cfg, "pretrain", "lr0", float, base.lr0),
        batch_size=_section_get(cfg, "pretrain", "batch_size", int,
                                base.batch_size),
        max_epochs=args.epochs if args.epochs is not None else
        _section_get(cfg, "pretrain", "max_epochs", int, base.max_epochs),
        seed=args.seed,
        plateau_factor=_section_get(cfg, "pretrain", "plateau_factor", float,
                                    base.plateau_factor),
        plateau_patience=_section_get(cfg, "pretrain", "plateau_patience", int,
                                      base.plateau_patience),
        min_lr=_section_get(cfg, "pretrain", "min_lr", float, base.min_lr),
        early_stop_patience=_section_get(cfg, "pretrain", "early_stop_patience",
                                         int, base.early_stop_patience),
    )


def _model_cfg(cfg: dict) -> ModelConfig:
    base = ModelConfig()
    return ModelConfig(upsample=_section_get(cfg, "model", "upsample", str,
                                             base.upsample))


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    if not Path(args.dataset, "manifest.json").exists():
        raise ConfigError(f"dataset {args.dataset} has no manifest")
    ds = read_dataset(args.dataset)
    pcfg = _pretrain_cfg(cfg, args)
    outdir = _out_dir(args, f"pretrain-{args.seed}")
    outdir.mkdir(parents=True, exist_ok=True)

    net = CvUnet(_model_cfg(cfg), seed=args.seed)
    resume = None
    if args.resume:
        state_path = Path(args.resume) / "trainer_state.npz"
        if not state_path.exists():
            raise ConfigError(f"no trainer state under {args.resume}")
        resume = load_trainer_state(state_path)
    net, history, state = pretrain(net, ds, pcfg, resume=resume)
    save_weights(outdir / "checkpoint.nahc", net)
    save_trainer_state(outdir / "trainer_state.npz", state)
    history.to_csv(outdir / "history.csv")
    _write_run_manifest(outdir, "pretrain", {
        "dataset": str(args.dataset), "seed": args.seed,
        "model": net.config.to_dict(),
        "pretrain": {k: getattr(pcfg, k) for k in (
            "lr0", "batch_size", "max_epochs", "plateau_factor",
            "plateau_patience", "min_lr", "early_stop_patience")},
        "resumed_from": str(args.resume) if args.resume else None,
    })
    print(f"pretrained {len(history.records)} epochs, best val "
          f"{state.best_val:.6g}; artifacts in {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------

def evaluate_network(net, sample, prop, method: str,
                     runtime_s: float | None = None):
    """Score a network on one sample: the prediction is the network output
    times the measurement-calibrated scale factor (a zero-step fine-tune)."""
    from .model import init_scale
    ft = FinetuneInput.from_sample(sample)
    sc = init_scale(net, ft.physical_pressure(), prop)
    vhat = predict(net, sc, sample)
    return mt.record_for(sample, vhat, method, runtime_s=runtime_s)


def _finetune_cfg(cfg: dict, args) -> FinetuneConfig:
    base = FinetuneConfig()
    return FinetuneConfig(
        lr_net=_section_get(cfg, "finetune", "lr_net", float, base.lr_net),
        lr_c=_section_get(cfg, "finetune", "lr_c", float, base.lr_c),
        epochs=args.epochs if args.epochs is not None else
        _section_get(cfg, "finetune", "epochs", int, base.epochs),
        physical_scale=_section_get(cfg, "finetune", "physical_scale",
                                    lambda s: s.lower() == "true",
                                    base.physical_scale),
    )


def _finetune_one(payload):
    """Worker: fine-tune one sample and evaluate it. Deterministic."""
    (dataset_dir, sample_id, ckpt_path, nah_dict, ft_kwargs, random_init_seed,
     histories_dir) = payload
    ds = read_dataset(dataset_dir)
    sample = ds.by_id(sample_id)
    nah = NahConfig.from_dict(nah_dict)
    fcfg = FinetuneConfig(**ft_kwargs)
    net, _ = load_checkpoint(ckpt_path)
    method = "finetuned"
    if random_init_seed is not None:
        net = CvUnet(net.config, seed=random_init_seed)
        method = "finetuned_random_init"
    prop = PropagatorCache(nah).at(sample.omega)
    t0 = time.perf_counter()
    net, sc, history = finetune(net, FinetuneInput.from_sample(sample), prop,
                                fcfg)
    elapsed = time.perf_counter() - t0
    vhat = predict(net, sc, sample)
    rec = mt.record_for(sample, vhat, method, runtime_s=elapsed)
    if histories_dir is not None:
        history.to_csv(Path(histories_dir) / f"{sample_id}.{method}.csv")
    return rec


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    nah = nah_config_from(cfg)
    ds = read_dataset(args.dataset)
    fcfg = _finetune_cfg(cfg, args)
    outdir = _out_dir(args, "finetune")
    (outdir / "histories").mkdir(parents=True, exist_ok=True)

    ids = [s.id for s in ds.samples]
    if args.samples is not None:
        ids = ids[:args.samples]
    if not ids:
        raise ConfigError("no samples selected")

    payloads = []
    for i, sid in enumerate(ids):
        rseed = (args.seed * 100003 + i) if args.random_init else None
        payloads.append((str(args.dataset), sid, str(args.checkpoint),
                         nah.to_dict(),
                         {"lr_net": fcfg.lr_net, "lr_c": fcfg.lr_c,
                          "epochs": fcfg.epochs,
                          "physical_scale": fcfg.physical_scale},
                         rseed, str(outdir / "histories")))

    records, failures = _run_jobs(_finetune_one, payloads, args.jobs)
    mt.write_records(outdir / "records.csv", records)
    _write_run_manifest(outdir, "finetune", {
        "dataset": str(args.dataset), "checkpoint": str(args.checkpoint),
        "samples": ids, "random_init": bool(args.random_init),
        "seed": args.seed, "geometry": nah.to_dict(),
        "finetune": {"lr_net": fcfg.lr_net, "lr_c": fcfg.lr_c,
                     "epochs": fcfg.epochs,
                     "physical_scale": fcfg.physical_scale},
        "failures": failures,
    })
    print(f"fine-tuned {len(records)}/{len(ids)} samples; records in {outdir}")
    if failures:
        for sid, err in failures:
            print(f"  failed {sid}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _run_jobs(fn, payloads, jobs):
    """Run payloads serially or in a pool; results merged in payload order."""
    records, failures = [], []
    if jobs and jobs > 1 and len(payloads) > 1:
        with get_context("fork").Pool(jobs) as pool:
            results = pool.map(_safe_call, [(fn, p) for p in payloads])
    else:
        results = [_safe_call((fn, p)) for p in payloads]
    for payload, (ok, value) in zip(payloads, results):
        if ok:
            records.append(value)
        else:
            failures.append((payload[1], value))
    return records, failures


def _safe_call(item):
    fn, payload = item
    try:
        return True, fn(payload)
    except NahError as err:
        return False, f"{type(err).__name__}: {err}"


# ---------------------------------------------------------------------------
# cesm
# ---------------------------------------------------------------------------

def _cesm_one(payload):
    dataset_dir, sample_id, nah_dict, esm_kwargs = payload
    ds = read_dataset(dataset_dir)
    sample = ds.by_id(sample_id)
    nah = NahConfig.from_dict(nah_dict)
    esm = EsmConfig(**esm_kwargs)
    p_phys = sample.p_holo.values * sample.norm_p
    from .core import field_from_array, Quantity
    t0 = time.perf_counter()
    res = cesm_solve(field_from_array(p_phys, Quantity.Pressure), sample.omega,
                     nah, esm)
    elapsed = time.perf_counter() - t0
    rec = mt.record_for(sample, res.v_rec, "cesm", runtime_s=elapsed)
    return rec, res.lambda_chosen, res.mae_table


def cmd_cesm(args) -> int:
    cfg = load_run_config(args.config)
    nah = nah_config_from(cfg)
    esm = esm_config_from(cfg)
    ds = read_dataset(args.dataset)
    outdir = _out_dir(args, "cesm")
    outdir.mkdir(parents=True, exist_ok=True)

    ids = [s.id for s in ds.samples]
    if args.samples is not None:
        ids = ids[:args.samples]
    if not ids:
        raise ConfigError("no samples selected")
    esm_kwargs = {
        "retreat_distance": esm.retreat_distance, "es_rows": esm.es_rows,
        "es_cols": esm.es_cols, "lambda_grid": esm.lambda_grid,
        "fista_iters": esm.fista_iters, "fista_tol": esm.fista_tol,
    }
    payloads = [(str(args.dataset), sid, nah.to_dict(), esm_kwargs)
                for sid in ids]
    results, failures = _run_jobs(_cesm_one, payloads, args.jobs)
    records = [r for r, _, _ in results]
    lam_report = {rec.sample_id: {"lambda_chosen": lam, "mae_table": table}
                  for rec, lam, table in results}
    mt.write_records(outdir / "records.csv", records)
    (outdir / "lambda_report.json").write_text(
        json.dumps(lam_report, sort_keys=True, indent=1) + "\n")
    _write_run_manifest(outdir, "cesm", {
        "dataset": str(args.dataset), "samples": ids,
        "geometry": nah.to_dict(), "esm": esm_kwargs, "failures": failures,
    })
    print(f"cesm solved {len(records)}/{len(ids)} samples; records in {outdir}")
    if failures:
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval (merge) and report
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    merged = []
    seen = set()
    for path in args.inputs:
        try:
            records = mt.read_records(path)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        for r in records:
            key = (r.sample_id, r.method)
            if key in seen:
                raise ConfigError(
                    f"duplicate record {key} while merging {path}")
            seen.add(key)
            merged.append(r)
    outdir = _out_dir(args, "eval")
    outdir.mkdir(parents=True, exist_ok=True)
    mt.write_records(outdir / "records.csv", merged)
    _write_run_manifest(outdir, "eval", {"inputs": [str(p) for p in args.inputs]})
    print(f"merged {len(merged)} records into {outdir / 'records.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        records = mt.read_records(args.records)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if not records:
        raise ConfigError("empty record set")
    outdir = _out_dir(args, "report")
    outdir.mkdir(parents=True, exist_ok=True)

    runtime_labels = {}
    for item in args.runtime_label or []:
        method, _, label = item.partition("=")
        if not label:
            raise ConfigError(f"--runtime-label needs method=label, got {item!r}")
        runtime_labels[method] = label

    stats = mt.summary_table(records)
    summary = mt.render_summary(stats, runtime_labels)
    (outdir / "summary.txt").write_text(summary)

    methods = sorted({r.method for r in records})
    for method in methods:
        rs = [r for r in records if r.method == method]
        mt.write_cdf(outdir / f"cdf_nmse_{method}.csv",
                     mt.cumulative([r.nmse_db for r in rs], descending=True))
        mt.write_cdf(outdir / f"cdf_ncc_{method}.csv",
                     mt.cumulative([r.ncc for r in rs], descending=False))
    mt.write_histogram(outdir / "hist_success.csv",
                       mt.success_histogram(records))
    _write_run_manifest(outdir, "report", {
        "records": str(args.records), "runtime_labels": runtime_labels,
    })
    print(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="nahlab",
        description="Near-field acoustic holography lab: data synthesis, "
                    "physics-informed transfer learning, sparse baseline.")
    ap.add_argument("--config", help="INI configuration file", default=None)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a modal dataset")
    g.add_argument("--family", choices=("rect", "ood"), required=True)
    g.add_argument("--bc", choices=("both", "ss", "clamped"), default="both")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", default=None)
    g.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="supervised pre-training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None, help="max epochs cap")
    p.add_argument("--resume", default=None,
                   help="previous pretrain output dir to continue from")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(fn=cmd_pretrain)

    f = sub.add_parser("finetune", help="physics-informed per-sample adaptation")
    f.add_argument("--dataset", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--samples", type=int, default=None,
                   help="first N samples of the dataset")
    f.add_argument("--epochs", type=int, default=None)
    f.add_argument("--random-init", action="store_true",
                   help="ablation: start from random weights")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--jobs", type=int, default=1)
    f.add_argument("-o", "--out", default=None)
    f.set_defaults(fn=cmd_finetune)

    c = sub.add_parser("cesm", help="compressive equivalent-source baseline")
    c.add_argument("--dataset", required=True)
    c.add_argument("--samples", type=int, default=None)
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("-o", "--out", default=None)
    c.set_defaults(fn=cmd_cesm)

    e = sub.add_parser("eval", help="merge evaluation record sets")
    e.add_argument("inputs", nargs="+")
    e.add_argument("-o", "--out", default=None)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="summary table, CDFs, success histogram")
    r.add_argument("--records", required=True)
    r.add_argument("--runtime-label", action="append", default=None,
                   help="method=label override for the runtime column")
    r.add_argument("-o", "--out", default=None)
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as err:
        return EXIT_CONFIG if err.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, IncompatibleCheckpoint, FileNotFoundError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (EigensolverError, EmptyModeSet) as err:
        print(f"generation failure: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteGradient, SolverFailure) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except NahError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
