"""Command-line entry point: ``udavt gen-data | train | matrix | export-attention``.

Exit codes: 0 success, 2 configuration problem, 3 numeric failure.

Output layout under the output directory::

    data/{domain}_{split}.bin            dataset cache
    runs/phase1/seed{S}/                 phase-1 checkpoint, metrics.csv, summary.json
    runs/{variant}/seed{S}/              final checkpoint, metrics.csv, summary.json
    matrix.csv, matrix.json              aggregate over seeds
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ARTIFACT_VERSION, ExperimentConfig, default_config, load_config
from .errors import ConfigError
from .model import VideoTransformer, load_checkpoint, save_checkpoint
from .synth import DOMAINS, SPLITS, cache_path, load_or_generate
from .trainer import (VARIANTS, Datasets, RunRecord, TrainingAborted, aggregate, build_model,
                      copy_model, export_attention, finalize_summary, phase1_train, run_phase2)

log = logging.getLogger("udavt")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUT_DIR_ENV = "UDAVT_OUT_DIR"

BASE_COLUMNS = ("config_hash", "artifact_version", "seed", "variant", "phase", "epoch", "lr",
                "loss_total", "loss_ce", "source_train_acc", "source_test_acc", "target_test_acc")
ALIGN_COLUMNS = {
    "source_only": (),
    "udavt": ("pseudo_label_acc", "pair_count", "queue_fill", "loss_ib", "loss_target_ce"),
    "vicreg": ("pseudo_label_acc", "pair_count", "queue_fill", "loss_vicreg", "loss_target_ce"),
    "mmd": ("pseudo_label_acc", "loss_mmd", "loss_target_ce"),
    "infonce": ("pseudo_label_acc", "loss_infonce", "loss_target_ce"),
    "adversarial": ("pseudo_label_acc", "loss_domain", "loss_target_ce"),
    "mcd": ("pseudo_label_acc", "loss_discrepancy", "loss_target_ce"),
}
MATRIX_COLUMNS = ("config_hash", "artifact_version", "variant", "mean", "std", "n", "seeds", "failed_seeds")


def metric_columns(variant: str) -> tuple[str, ...]:
    method = VARIANTS[variant]["method"] if variant in VARIANTS else variant
    return BASE_COLUMNS + ALIGN_COLUMNS.get(method, ())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path: Path, rows: list[dict], columns: tuple[str, ...], stamp: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        full = {**stamp, **row}
        w.writerow([_fmt(full.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def provenance(cfg: ExperimentConfig, seed: int | None) -> dict:
    return {"config_hash": cfg.config_hash(), "artifact_version": ARTIFACT_VERSION, "seed": seed}


def _tag(stamp: dict) -> str:
    return f"[{stamp['config_hash']} seed={stamp['seed']} v{stamp['artifact_version']}]"


# ---------------------------------------------------------------------------
# commands


def load_datasets(cfg: ExperimentConfig, out_dir: Path) -> tuple[Datasets, dict[str, bool]]:
    cache_dir = out_dir / "data"
    parts, hits = {}, {}
    for domain in DOMAINS:
        for split in SPLITS:
            ds, hit = load_or_generate(cfg.data, domain, split, cache_dir)
            parts[f"{domain}_{split}"] = ds
            hits[f"{domain}_{split}"] = hit
    return Datasets(parts["source_train"], parts["source_test"], parts["target_train"],
                    parts["target_test"]), hits


def cmd_gen_data(cfg: ExperimentConfig, out_dir: Path) -> int:
    data, hits = load_datasets(cfg, out_dir)
    stamp = provenance(cfg, cfg.data.seed)
    print(f"config_hash={stamp['config_hash']} seed={cfg.data.seed} version={ARTIFACT_VERSION}")
    for name, ds in (("source_train", data.source_train), ("source_test", data.source_test),
                     ("target_train", data.target_train), ("target_test", data.target_test)):
        counts = np.bincount(ds.labels, minlength=cfg.data.num_classes).tolist()
        state = "cache valid, skipped" if hits[name] else "written"
        domain, split = name.split("_")
        print(f"{name}: {len(ds)} clips, per class {counts} -> {cache_path(out_dir / 'data', domain, split)} "
              f"({state})")
    return EXIT_OK


def phase1_dir(out_dir: Path, seed: int) -> Path:
    return out_dir / "runs" / "phase1" / f"seed{seed}"


def run_dir(out_dir: Path, variant: str, seed: int) -> Path:
    return out_dir / "runs" / variant / f"seed{seed}"


def _write_run(dest: Path, cfg: ExperimentConfig, seed: int, variant: str, phase: str,
               model: VideoTransformer, record: RunRecord, summary: dict, ckpt_name: str) -> None:
    dest.mkdir(parents=True, exist_ok=True)
    stamp = provenance(cfg, seed)
    save_checkpoint(dest / ckpt_name, model, seed, {**stamp, "variant": variant, "phase": phase})
    write_metrics_csv(dest / "metrics.csv", record.rows, metric_columns(variant), {**stamp, "variant": variant})
    write_json(dest / "summary.json", {**stamp, "variant": variant, "phase": phase,
                                       "checkpoint": ckpt_name, "config": cfg.to_dict(),
                                       "result": summary})


def _eval_sets(data: Datasets) -> dict:
    return {"source_test": data.source_test, "target_test": data.target_test}


def train_phase1(cfg: ExperimentConfig, data: Datasets, seed: int) -> tuple[VideoTransformer, RunRecord]:
    model = build_model(cfg.model, seed, cfg.train.dtype)
    record = RunRecord()
    phase1_train(model, data.source_train, cfg.train.phase1, seed, record, _eval_sets(data))
    return model, record


def cmd_train(cfg: ExperimentConfig, out_dir: Path, phase: str, variant: str, seed: int,
              checkpoint: Path | None = None) -> int:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown method {variant!r}; choose from {', '.join(VARIANTS)}")
    data, _ = load_datasets(cfg, out_dir)
    stamp = provenance(cfg, seed)
    p1 = phase1_dir(out_dir, seed)
    record = RunRecord()
    try:
        if phase in ("1", "both"):
            model, record = train_phase1(cfg, data, seed)
            summary = finalize_summary(model, data, RunRecord(rows=record.rows, summary=dict(record.summary)))
            _write_run(p1, cfg, seed, "phase1", "1", model, record, summary, "checkpoint.ckpt")
            if phase == "1":
                print(f"{_tag(stamp)} phase 1 target_test_acc={summary['target_test_acc']:.4f} -> {p1}")
                return EXIT_OK
        else:
            ckpt = checkpoint or p1 / "checkpoint.ckpt"
            if not Path(ckpt).is_file():
                raise ConfigError(f"phase 2 needs a phase-1 checkpoint; {ckpt} not found "
                                  f"(run --phase 1 first or use --phase both)")
            model, header = load_checkpoint(ckpt, dtype=np.dtype(cfg.train.dtype))
            if model.config != cfg.model:
                raise ConfigError(f"{ckpt}: model settings differ from the config")
        p2 = replace(cfg.train.phase2, **VARIANTS[variant])
        run_phase2(model, p2, data, seed, record)
        summary = finalize_summary(model, data, record)
    except TrainingAborted as exc:
        dest = run_dir(out_dir, variant, seed)
        dest.mkdir(parents=True, exist_ok=True)
        write_json(dest / "failure.json", {**stamp, "variant": variant, "error": str(exc),
                                           "diagnostics": exc.diagnostics})
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    dest = run_dir(out_dir, variant, seed)
    _write_run(dest, cfg, seed, variant, phase, model, record, summary, "final.ckpt")
    print(f"{_tag(stamp)} {variant} target_test_acc={summary['target_test_acc']:.4f} -> {dest}")
    return EXIT_OK


def cmd_matrix(cfg: ExperimentConfig, out_dir: Path, variants: list[str] | None = None,
               seeds: list[int] | None = None) -> int:
    variants = list(variants or VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    seeds = list(seeds if seeds is not None else cfg.train.seeds)
    data, _ = load_datasets(cfg, out_dir)
    results: dict[str, list[dict]] = {v: [] for v in variants}
    for seed in seeds:
        try:
            base, rec1 = train_phase1(cfg, data, seed)
        except TrainingAborted as exc:
            for v in variants:
                results[v].append({"seed": seed, "error": str(exc)})
            continue
        for v in variants:
            model = copy_model(base)
            record = RunRecord(rows=list(rec1.rows), summary=dict(rec1.summary))
            p2 = replace(cfg.train.phase2, **VARIANTS[v])
            stamp = provenance(cfg, seed)
            try:
                run_phase2(model, p2, data, seed, record)
                summary = finalize_summary(model, data, record)
            except TrainingAborted as exc:
                dest = run_dir(out_dir, v, seed)
                dest.mkdir(parents=True, exist_ok=True)
                write_json(dest / "failure.json", {**stamp, "variant": v, "error": str(exc),
                                                   "diagnostics": exc.diagnostics})
                results[v].append({"seed": seed, "error": str(exc)})
                continue
            _write_run(run_dir(out_dir, v, seed), cfg, seed, v, "both", model, record, summary, "final.ckpt")
            results[v].append({"seed": seed, "target_test_acc": summary["target_test_acc"]})
            log.info("matrix %s seed %d target %.4f", v, seed, summary["target_test_acc"])

    rows = aggregate(results)
    stamp = provenance(cfg, None)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATRIX_COLUMNS)
    for r in rows:
        ok_seeds = [x["seed"] for x in results[r["variant"]] if "error" not in x]
        w.writerow([stamp["config_hash"], ARTIFACT_VERSION, r["variant"], _fmt(r["mean"]), _fmt(r["std"]),
                    r["n"], " ".join(map(str, ok_seeds)), " ".join(map(str, r["failed_seeds"]))])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "matrix.csv").write_text(buf.getvalue())
    write_json(out_dir / "matrix.json", {**stamp, "seeds": seeds, "config": cfg.to_dict(),
                                         "rows": rows, "runs": results})
    for r in rows:
        note = f" failed seeds {r['failed_seeds']}" if r["failed_seeds"] else ""
        print(f"{r['variant']:22s} mean={r['mean']:.4f} std={r['std']:.4f} n={r['n']}{note}")
    return EXIT_OK


def cmd_export_attention(checkpoint: Path, cfg: ExperimentConfig, out_dir: Path, out_file: Path | None,
                         samples: int, domain: str = "target", split: str = "test") -> int:
    if not Path(checkpoint).is_file():
        raise ConfigError(f"checkpoint {checkpoint} not found")
    if domain not in DOMAINS or split not in SPLITS:
        raise ConfigError(f"unknown dataset {domain}/{split}")
    model, header = load_checkpoint(checkpoint)
    ds, _ = load_or_generate(cfg.data, domain, split, out_dir / "data")
    records = export_attention(model, ds, samples)
    stamp = provenance(cfg, header["seed"])
    out_file = out_file or out_dir / "attention.json"
    out_file.parent.mkdir(parents=True, exist_ok=True)
    write_json(out_file, {**stamp, "checkpoint_meta": header.get("meta", {}), "dataset": f"{domain}/{split}",
                          "records": records})
    print(f"{_tag(stamp)} wrote {len(records)} attention records -> {out_file}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udavt", description="Video domain adaptation experiments.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="experiment config file (defaults if omitted)")
        sp.add_argument("--out", type=Path, help=f"output directory (else ${OUT_DIR_ENV}, else ./runs)")

    common(sub.add_parser("gen-data", help="generate or validate the dataset cache"))
    sp = sub.add_parser("train", help="run phase 1, phase 2 or both for one seed")
    common(sp)
    sp.add_argument("--phase", choices=("1", "2", "both"), default="both")
    sp.add_argument("--method", default="udavt", help=f"one of: {', '.join(VARIANTS)}")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--checkpoint", type=Path, help="phase-1 checkpoint for --phase 2")
    sp = sub.add_parser("matrix", help="all variants over the configured seeds")
    common(sp)
    sp.add_argument("--variants", help="comma-separated subset of variants")
    sp.add_argument("--seeds", help="comma-separated seeds (overrides the config)")
    sp = sub.add_parser("export-attention", help="dump temporal attention of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--samples", type=int, default=32)
    sp.add_argument("--domain", default="target")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out-file", type=Path)
    return p


def resolve_out_dir(arg: Path | None) -> Path:
    if arg is not None:
        return arg
    return Path(os.environ.get(OUT_DIR_ENV, "runs"))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else default_config()
        out_dir = resolve_out_dir(args.out)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir, args.phase, args.method, args.seed, args.checkpoint)
        if args.command == "matrix":
            variants = args.variants.split(",") if args.variants else None
            try:
                seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
            except ValueError:
                raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
            return cmd_matrix(cfg, out_dir, variants, seeds)
        if args.command == "export-attention":
            if args.samples < 1:
                raise ConfigError("--samples must be at least 1")
            return cmd_export_attention(args.checkpoint, cfg, out_dir, args.out_file, args.samples,
                                        args.domain, args.split)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
