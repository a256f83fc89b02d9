"""Line-structured metrics stream: one JSON object per line.

Each epoch writes ``{"type": "epoch", ...}``; a run closes with one
``{"type": "summary", ...}`` record.  Every run gets its own file, created
exclusively, so concurrent runs never share or interleave output.
"""

from __future__ import annotations

import json
import os
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path

from .train import EpochRecord, Metrics


@dataclass
class RunRecord:
    config: dict
    data_fraction: float
    epochs: list[EpochRecord] = field(default_factory=list)
    bank_checksum: str = ""
    final_test: Metrics | None = None
    extra: dict = field(default_factory=dict)


def epoch_to_json(rec: EpochRecord) -> dict:
    return {"type": "epoch", "epoch": rec.epoch, "alpha": rec.alpha, "lr": rec.lr, "seconds": rec.seconds,
            "bank_size": rec.bank_size, "metrics": rec.metrics.to_dict()}


def epoch_from_json(d: dict) -> EpochRecord:
    return EpochRecord(int(d["epoch"]), float(d["alpha"]), float(d["lr"]), float(d["seconds"]),
                       Metrics.from_dict(d["metrics"]), int(d["bank_size"]))


def summary_to_json(run: RunRecord) -> dict:
    return {"type": "summary", "config": run.config, "data_fraction": run.data_fraction,
            "bank_checksum": run.bank_checksum, "epochs": len(run.epochs),
            "test": run.final_test.to_dict() if run.final_test else None, "extra": run.extra}


def new_metrics_path(out_dir, prefix: str = "metrics") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%dT%H%M%S")
    while True:
        path = out / f"{prefix}-{stamp}-{os.getpid()}-{secrets.token_hex(3)}.jsonl"
        try:
            path.open("x").close()
            return path
        except FileExistsError:
            continue


def emit_metrics(path, record: dict) -> None:
    """Append one record as a single line."""
    line = json.dumps(record, sort_keys=True) + "\n"
    with open(path, "a") as fh:
        fh.write(line)
        fh.flush()


def write_run(path, run: RunRecord) -> None:
    for rec in run.epochs:
        emit_metrics(path, epoch_to_json(rec))
    emit_metrics(path, summary_to_json(run))


def read_run(path) -> RunRecord:
    epochs, summary = [], None
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("type") == "epoch":
                epochs.append(epoch_from_json(d))
            elif d.get("type") == "summary":
                summary = d
            else:
                raise ValueError(f"{path}:{n}: unknown record type {d.get('type')!r}")
    if summary is None:
        raise ValueError(f"{path}: no summary record")
    test = Metrics.from_dict(summary["test"]) if summary.get("test") else None
    return RunRecord(summary["config"], float(summary["data_fraction"]), epochs, summary["bank_checksum"], test,
                     summary.get("extra", {}))
