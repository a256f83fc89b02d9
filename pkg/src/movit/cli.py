"""Command-line entry points: train, eval, distill, inspect-bank, gen-data, sweep."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, load_dataset, save_npz, stratified_fraction, stratified_split, synthetic_split
from .memory import BANK_MAGIC, FormatError, load_bank, save_bank
from .pal import PROTO_MAGIC, distill, load_prototypes, mmd_squared, save_prototypes, split_across_heads
from .runlog import RunRecord, emit_metrics, epoch_to_json, new_metrics_path, summary_to_json
from .train import Model, evaluate, fit
from .attention import CompatibilityError, check_bank_compatible

log = logging.getLogger("movit")


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train/test sets from configured paths, else the seeded synthetic task."""
    if cfg.data.data_path:
        train = load_dataset(cfg.data.data_path, cfg.vit.image_size, cfg.vit.in_channels)
        if cfg.data.test_path:
            test = load_dataset(cfg.data.test_path, cfg.vit.image_size, cfg.vit.in_channels)
        else:
            train, test = stratified_split(train, 0.2, cfg.data.data_seed)
        return train, test
    return synthetic_split(cfg.synthetic_spec(), cfg.data.test_per_class)


def _check_dataset(cfg: RunConfig, ds: Dataset, path: str = "dataset") -> None:
    want = (cfg.vit.in_channels, cfg.vit.image_size, cfg.vit.image_size)
    if ds.images.shape[1:] != want:
        raise ConfigError(f"{path}: images have shape {ds.images.shape[1:]}, model expects {want}")
    if ds.num_classes != cfg.vit.num_classes:
        raise ConfigError(f"{path}: {ds.num_classes} classes, model configured for {cfg.vit.num_classes}")


def run_train(cfg: RunConfig, out_dir, movit: bool = True, data: tuple[Dataset, Dataset] | None = None,
              quiet: bool = False) -> RunRecord:
    """Train one model, writing checkpoint, bank file and a metrics stream under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not movit:
        cfg.vit.movit_layer = None
    train, test = data if data is not None else load_datasets(cfg)
    _check_dataset(cfg, train)
    train = stratified_fraction(train, cfg.train.data_fraction, cfg.train.seed)
    metrics_path = new_metrics_path(out)
    model = Model.create(cfg.vit, cfg.train.seed)

    def on_epoch(rec):
        emit_metrics(metrics_path, epoch_to_json(rec))
        if not quiet:
            print(f"epoch {rec.epoch:3d}  loss {rec.metrics.loss:.4f}  train-acc {rec.metrics.accuracy:.3f}"
                  f"  alpha {rec.alpha:.6f}  bank {rec.bank_size}  {rec.seconds:.1f}s")

    bank, epochs = fit(model, train, cfg.train, on_epoch)
    test_metrics = evaluate(model, bank, test, cfg.train.knn_k, cfg.train.knn_mode)
    save_checkpoint(out / "checkpoint.movc", cfg.vit, model.params, {"run": cfg.to_dict()})
    checksum = ""
    if bank is not None:
        save_bank(bank, out / "bank.movb")
        checksum = bank.checksum()
    run = RunRecord(cfg.to_dict(), cfg.train.data_fraction, epochs, checksum, test_metrics,
                    {"train_samples": len(train), "test_samples": len(test), "metrics_file": metrics_path.name})
    emit_metrics(metrics_path, summary_to_json(run))
    if not quiet:
        print("test " + "  ".join(f"{k} {v:.4f}" for k, v in test_metrics.to_dict().items()))
    return run


def load_any_bank(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == BANK_MAGIC:
        return load_bank(path)
    if magic == PROTO_MAGIC:
        return load_prototypes(path)
    raise FormatError(f"{path}: unrecognised magic {magic!r}", 0)


def run_eval(checkpoint, bank_path, dataset: Dataset, knn_k: int = 32, knn_mode: str = "exact",
             out_dir=None, quiet: bool = False):
    """Evaluate a checkpoint against a bank or prototype file; returns ``(Metrics, seconds per sample)``."""
    vit_cfg, params, _ = load_checkpoint(checkpoint)
    bank = load_any_bank(bank_path) if bank_path else None
    if bank is not None:
        check_bank_compatible(bank, vit_cfg.num_heads, vit_cfg.head_dim)
    model = Model(vit_cfg, params)
    start = time.perf_counter()
    metrics = evaluate(model, bank, dataset, knn_k, knn_mode)
    per_sample = (time.perf_counter() - start) / max(1, len(dataset))
    if out_dir is not None:
        path = new_metrics_path(out_dir, "eval")
        emit_metrics(path, {"type": "eval", "checkpoint": str(checkpoint), "bank": str(bank_path),
                            "bank_size": len(bank) if bank is not None else 0, "samples": len(dataset),
                            "seconds_per_sample": per_sample, "metrics": metrics.to_dict()})
    if not quiet:
        print("  ".join(f"{k} {v:.4f}" for k, v in metrics.to_dict().items()))
    return metrics, per_sample


def run_distill(bank_path, num_classes: int, tau: float = 0.5, multiplier: int = 32, variant: str = "standard",
                out_path=None, quiet: bool = False):
    bank = load_bank(bank_path)
    pb = distill(bank, num_classes, tau, variant, multiplier)
    if out_path is not None:
        save_prototypes(pb, out_path)
    if not quiet:
        rng = np.random.default_rng(0)
        for h, ph in enumerate(split_across_heads(pb.P, bank.num_heads)):
            keys = bank.head_arrays(h)[1]
            baseline = keys[np.sort(rng.choice(len(keys), ph, replace=False))]
            before = mmd_squared(baseline, keys, variant)
            after = mmd_squared(pb.keys[h], keys, variant)
            print(f"head {h}: MMD^2 random subset {before:.6f} -> greedy prototypes {after:.6f}  ({ph} of {len(keys)})")
        print(f"M = {len(bank)}, P = {pb.P}, compression ratio M/P = {len(bank) / pb.P:g}")
    return pb


def inspect_bank(path) -> dict:
    bank = load_any_bank(path)
    info = {"file": str(path), "kind": "prototypes" if hasattr(bank, "tau") else "memory",
            "head_dim": bank.head_dim, "num_heads": bank.num_heads, "facts": len(bank),
            "per_head": [bank.head_size(h) for h in range(bank.num_heads)]}
    if hasattr(bank, "tau"):
        info["tau"] = bank.tau
    else:
        info["checksum"] = bank.checksum()
    norms = [np.linalg.norm(bank.head_arrays(h)[1], axis=1) for h in range(bank.num_heads)]
    flat = np.concatenate(norms) if norms else np.zeros(0)
    if len(flat):
        info["key_norm"] = {"min": float(flat.min()), "mean": float(flat.mean()), "max": float(flat.max())}
    return info


def sweep(cfg: RunConfig, fractions, seeds, out_dir, epochs: int | None = None) -> list[dict]:
    """Baseline vs MoViT test accuracy over data fractions and seeds."""
    rows = []
    base_data = load_datasets(cfg)
    for frac in fractions:
        for seed in seeds:
            for movit in (False, True):
                run_cfg = load_config(overrides={**cfg.to_dict(), "seed": seed, "data_fraction": frac,
                                                 **({"total_epochs": epochs} if epochs else {})})
                tag = f"f{frac:g}-s{seed}-{'movit' if movit else 'vit'}"
                run = run_train(run_cfg, Path(out_dir) / tag, movit=movit, data=base_data, quiet=True)
                rows.append({"fraction": frac, "seed": seed, "model": "movit" if movit else "vit",
                             "accuracy": run.final_test.accuracy, "train_samples": run.extra["train_samples"]})
                log.info("%s accuracy %.4f", tag, run.final_test.accuracy)
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    out = []
    for frac in sorted({r["fraction"] for r in rows}):
        entry = {"fraction": frac}
        for model in ("vit", "movit"):
            acc = np.array([r["accuracy"] for r in rows if r["fraction"] == frac and r["model"] == model])
            entry[f"{model}_mean"] = float(acc.mean())
            entry[f"{model}_std"] = float(acc.std())
        out.append(entry)
    return out


# ---------------------------------------------------------------- argparse

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--knn-k", type=int, dest="knn_k")
    p.add_argument("--out", default="runs/latest", help="output directory")


def _overrides(args) -> dict:
    keys = ("seed", "knn_k", "data_fraction", "ema_orientation", "mmd_variant", "total_epochs", "data_path",
            "test_path")
    return {k: getattr(args, k, None) for k in keys if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="movit", description="Memory-augmented ViT: train, distill, evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a baseline or MoViT model")
    _add_common(p)
    p.add_argument("--data-fraction", type=float, dest="data_fraction")
    p.add_argument("--movit", choices=("on", "off"), default="on")
    p.add_argument("--ema-orientation", choices=("paper", "inverted"), dest="ema_orientation")
    p.add_argument("--epochs", type=int, dest="total_epochs")
    p.add_argument("--data", dest="data_path", help="training npz file or image folder")
    p.add_argument("--test-data", dest="test_path")

    p = sub.add_parser("eval", help="evaluate a checkpoint with a bank or prototype file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--bank")
    group.add_argument("--prototypes")
    p.add_argument("--data", dest="data_path", help="npz file or image folder (default: synthetic test split)")

    p = sub.add_parser("distill", help="distill a memory bank into prototypes")
    p.add_argument("--bank", required=True)
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--multiplier", type=int, default=32)
    p.add_argument("--mmd-variant", choices=("standard", "paper"), default="standard")
    p.add_argument("--out", default="prototypes.movp")

    p = sub.add_parser("inspect-bank", help="summarize a bank or prototype file")
    p.add_argument("path")

    p = sub.add_parser("gen-data", help="write the synthetic train/test split as npz files")
    _add_common(p)

    p = sub.add_parser("sweep", help="baseline vs MoViT accuracy across data fractions")
    _add_common(p)
    p.add_argument("--fractions", default="0.05,0.1,0.25,1.0")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int, dest="total_epochs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            cfg = load_config(args.config, _overrides(args))
            run = run_train(cfg, args.out, movit=args.movit == "on")
            print(f"wrote {args.out}/checkpoint.movc" + (f", {args.out}/bank.movb" if run.bank_checksum else ""))
        elif args.command == "eval":
            cfg = load_config(args.config, _overrides(args))
            if cfg.data.data_path:
                data = load_dataset(cfg.data.data_path, cfg.vit.image_size, cfg.vit.in_channels)
            else:
                data = load_datasets(cfg)[1]
            run_eval(args.checkpoint, args.bank or args.prototypes, data, cfg.train.knn_k, cfg.train.knn_mode,
                     args.out)
        elif args.command == "distill":
            run_distill(args.bank, args.num_classes, args.tau, args.multiplier, args.mmd_variant, args.out)
            print(f"wrote {args.out}")
        elif args.command == "inspect-bank":
            print(json.dumps(inspect_bank(args.path), indent=2))
        elif args.command == "gen-data":
            cfg = load_config(args.config, _overrides(args))
            if args.seed is not None:
                cfg.data.data_seed = args.seed
            train, test = synthetic_split(cfg.synthetic_spec(), cfg.data.test_per_class)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            save_npz(train, out / "train.npz")
            save_npz(test, out / "test.npz")
            print(f"wrote {out / 'train.npz'} ({len(train)} samples), {out / 'test.npz'} ({len(test)} samples)")
        elif args.command == "sweep":
            cfg = load_config(args.config, _overrides(args))
            rows = sweep(cfg, [float(f) for f in args.fractions.split(",")],
                         [int(s) for s in args.seeds.split(",")], args.out)
            print(f"{'fraction':>9} {'vit mean':>9} {'vit std':>8} {'movit mean':>11} {'movit std':>10}")
            for e in summarize_sweep(rows):
                print(f"{e['fraction']:>9g} {e['vit_mean']:>9.4f} {e['vit_std']:>8.4f} "
                      f"{e['movit_mean']:>11.4f} {e['movit_std']:>10.4f}")
    except (ConfigError, FormatError, CompatibilityError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
