"""Run artifacts: stable run ids, output directory resolution, and the CSV /
JSON writers.

Artifacts are deliberately timestamp-free so a (config, seed, command)
triple reproduces byte-identical output regardless of worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import canonical_json

OUT_ENV = "LRM_OUT_DIR"
DEFAULT_OUT = "runs"


def run_id(cfg: dict, seed: int, command: str) -> str:
    payload = canonical_json({"config": cfg, "seed": int(seed),
                              "command": command})
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def out_root(override=None) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def prepare_run_dir(root: Path, rid: str, force: bool) -> Path:
    run_dir = root / rid
    if run_dir.exists():
        if not force:
            raise FileExistsError(
                f"{run_dir} already exists (use --force to overwrite)")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    return run_dir


@dataclass
class RunManifest:
    run_id: str
    command: str
    seed: int
    config: dict
    status: str = "OK"
    schedule_report: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    failure: dict = field(default_factory=dict)

    def write(self, run_dir: Path):
        path = run_dir / "manifest.json"
        doc = {
            "run_id": self.run_id,
            "command": self.command,
            "seed": self.seed,
            "status": self.status,
            "config": self.config,
            "schedule_report": self.schedule_report,
            "totals": self.totals,
            "outputs": sorted(self.outputs),
            "failure": self.failure,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_records_csv(run_dir: Path, replica_id: int, records) -> Path:
    rec_dir = run_dir / "records"
    rec_dir.mkdir(exist_ok=True)
    rows = []
    for r in records:
        rows.append((r.k, r.gamma, r.grad_calls,
                     float(np.linalg.norm(r.x_next)),
                     float(np.linalg.norm(r.drift)),
                     float(np.linalg.norm(r.noise_U)),
                     float(np.linalg.norm(r.bias_b))))
    return write_csv(rec_dir / f"{replica_id}.csv",
                     ("k", "gamma", "grad_calls", "norm_x", "norm_v",
                      "norm_U", "norm_b"), rows)
