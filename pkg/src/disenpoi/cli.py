"""Command-line entry points: prepare, train, evaluate.

Exit codes are a stable contract: 0 success, 1 I/O failure, 2 data
validation failure, 3 checkpoint/dataset compatibility failure.

Every command finishes by atomically writing a manifest.json into its output
directory recording the command, its inputs with content hashes, the seed and
the wall-clock time. Primary outputs (bundle files, checkpoints, reports) are
byte-identical across reruns with the same inputs and seeds; only the
manifest's timing field varies.

Thread count comes from --threads, falling back to the DISENPOI_THREADS
environment variable, and never changes results, only wall time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from .errors import CompatibilityError, DataError
from .evaluator import evaluate_split
from .graphs import build_geo_graph
from .ingest import (MAX_SEQ_LEN_DEFAULT, build_histories, generate_samples,
                     load_bundle, parse_checkins, save_bundle,
                     train_fraction_slice)
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fit

EXIT_OK = 0
EXIT_IO = 1
EXIT_DATA = 2
EXIT_COMPAT = 3


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, inputs: list[Path],
                   seed, started: float, extra: dict | None = None) -> None:
    manifest = {"command": command,
                "out_dir": str(out_dir),
                "inputs": {str(p): sha256_file(p) for p in sorted(inputs)},
                "seed": seed,
                "wall_clock_seconds": time.time() - started}
    if extra:
        manifest.update(extra)
    tmp = out_dir / f".manifest.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_dir / "manifest.json")


def verify_manifest(path) -> bool:
    """Recompute the recorded input hashes; True when all still match."""
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return all(sha256_file(p) == h for p, h in manifest["inputs"].items())


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("DISENPOI_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError(f"DISENPOI_THREADS must be an integer, got {env!r}")
    return 1


def _bundle_files(data_dir: Path) -> list[Path]:
    return [data_dir / name for name in
            ("samples.train", "samples.valid", "samples.test",
             "pois.tsv", "meta.json")]


def cmd_prepare(args) -> int:
    started = time.time()
    input_path = Path(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(input_path, "r", encoding="utf-8") as fh:
        report = parse_checkins(fh, args.format)
    build = build_histories(report.records)
    split = generate_samples(build.histories, build.poi_table,
                             rng_seed=args.seed, max_seq_len=args.max_seq_len)
    save_bundle(split, out_dir,
                meta={"seed": args.seed,
                      "format": args.format,
                      "max_seq_len": args.max_seq_len,
                      "malformed_lines": report.num_bad,
                      "dropped_single_visit_users": build.dropped_single_visit,
                      "coordinate_conflicts": build.coordinate_conflicts})
    write_manifest(out_dir, "prepare", [input_path], args.seed, started)
    print(f"prepared bundle: {split.num_users} users, {split.num_pois} POIs, "
          f"{len(split.train)} train / {len(split.validation)} valid / "
          f"{len(split.test)} test samples "
          f"({report.num_bad} malformed lines skipped)")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = Path(args.config) if args.config else None

    cfg = TrainConfig.from_file(config_path) if config_path else TrainConfig()
    if args.threads is not None or os.environ.get("DISENPOI_THREADS"):
        cfg.threads = _threads(args)

    split, meta = load_bundle(data_dir)
    if cfg.max_seq_len != meta.get("max_seq_len", cfg.max_seq_len):
        raise CompatibilityError(
            f"config max_seq_len {cfg.max_seq_len} differs from bundle "
            f"{meta.get('max_seq_len')}")
    if cfg.train_fraction != 1.0:
        split = train_fraction_slice(split, cfg.train_fraction, cfg.seed)

    geo = build_geo_graph(split.poi_table, cfg.delta_d)
    geo.save(out_dir / "geo_graph.bin")
    result = fit(cfg, split, geo, log_path=out_dir / "train.log.jsonl")
    save_checkpoint(out_dir / "model.ckpt", result.params_best,
                    extra=result.checkpoint_extra(cfg))

    inputs = _bundle_files(data_dir) + ([config_path] if config_path else [])
    write_manifest(out_dir, "train", inputs, cfg.seed, started,
                   extra={"effective_config": cfg.to_dict(),
                          "best_epoch": result.best_epoch,
                          "best_val_auc": result.best_val_auc})
    if result.log:
        print(f"trained {cfg.epochs} epochs; best val AUC "
              f"{result.best_val_auc:.4f} at epoch {result.best_epoch}")
    else:
        print("trained 0 epochs; wrote initial checkpoint")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    ckpt_path = Path(args.ckpt)
    out_dir = Path(args.out) if args.out else ckpt_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    params, extra = load_checkpoint(ckpt_path)
    split, _ = load_bundle(data_dir)
    if params.dims.num_pois != split.num_pois:
        raise CompatibilityError(
            f"checkpoint has {params.dims.num_pois} POIs, bundle has "
            f"{split.num_pois}")
    delta_d = extra.get("config", {}).get("delta_d", 1.0)
    geo = build_geo_graph(split.poi_table, delta_d)
    samples = split.test if args.split == "test" else split.validation

    embeddings_path = out_dir / "embeddings.tsv" if args.diagnostics else None
    report = evaluate_split(params, extra, samples, geo,
                            diagnostics=args.diagnostics,
                            embeddings_path=embeddings_path,
                            threads=_threads(args))
    if args.train_fraction is not None:
        report.slices = {"train_fraction": args.train_fraction}
    report.save(out_dir / "report.json")
    write_manifest(out_dir, "evaluate",
                   _bundle_files(data_dir) + [ckpt_path],
                   extra.get("config", {}).get("seed"), started,
                   extra={"split": args.split})
    print(f"AUC {report.auc:.6f} Logloss {report.logloss:.6f} "
          f"({report.n_samples} samples, split={args.split})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disenpoi",
        description="Dual-graph POI CTR engine: prepare data, train, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse a check-in log into a dataset bundle")
    p.add_argument("--input", required=True, help="check-in TSV file")
    p.add_argument("--format", choices=("native-tsv", "foursquare-tsv"),
                   default="native-tsv")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-seq-len", type=int, default=MAX_SEQ_LEN_DEFAULT)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_prepare)

    t = sub.add_parser("train", help="train a model on a dataset bundle")
    t.add_argument("--data", required=True, help="bundle directory")
    t.add_argument("--config", default=None, help="JSON training config")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--threads", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a bundle split")
    e.add_argument("--data", required=True, help="bundle directory")
    e.add_argument("--ckpt", required=True, help="model.ckpt path")
    e.add_argument("--split", choices=("test", "valid"), default="test")
    e.add_argument("--diagnostics", action="store_true",
                   help="also compute cosine diagnostics and embeddings.tsv")
    e.add_argument("--train-fraction", type=float, default=None,
                   help="tag the report with the training fraction used")
    e.add_argument("--out", default=None,
                   help="report directory (default: checkpoint's directory)")
    e.add_argument("--threads", type=int, default=None)
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
