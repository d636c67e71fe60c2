"""Turn a saved run directory into CSV/JSON reports."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..cachemgr import read_records
from ..svcca import ideal_schedule
from .config import parse_config
from .train import INTERVAL_COLUMNS

ORACLE_COLUMNS = ("interval", "ideal_frozen", "online_frozen", "applied_frozen", "within_one")


class ReportError(RuntimeError):
    pass


def tracking_fraction(online, ideal, tolerance: int = 1) -> float:
    """Share of intervals where the online frozen count is within ``tolerance`` of the ideal."""
    online, ideal = list(online), list(ideal)
    if len(online) != len(ideal):
        raise ValueError("schedules differ in length")
    if not online:
        return float("nan")
    return sum(abs(a - b) <= tolerance for a, b in zip(online, ideal)) / len(online)


def load_activations(directory: Path) -> list[np.ndarray]:
    """Per-layer probe activations from one checkpoint dump directory."""
    files = sorted(Path(directory).glob("layer_*.bin"))
    if not files:
        raise ReportError(f"no layer dumps in {directory}")
    out = []
    for f in files:
        recs = sorted(read_records(f), key=lambda r: r.original_index)
        out.append(np.stack([r.payload for r in recs]))
    return out


def load_rows(run_dir: Path) -> list[dict]:
    path = Path(run_dir) / "rows.jsonl"
    if not path.is_file():
        raise ReportError(f"{run_dir} has no rows.jsonl")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def oracle_rows(run_dir: Path, rows: list[dict], threshold: float, variance_keep: float) -> list[dict]:
    if not rows:
        return []
    ckpt = Path(run_dir) / "checkpoints"
    dirs = sorted(ckpt.glob("interval_*"))
    if len(dirs) != len(rows) or not (ckpt / "final").is_dir():
        raise ReportError(f"{ckpt} does not hold one dump per interval plus the final model")
    final = load_activations(ckpt / "final")
    ideal = ideal_schedule([load_activations(d) for d in dirs], final, threshold, variance_keep)
    return [{"interval": r["interval"], "ideal_frozen": i, "online_frozen": r["test_boundary"],
             "applied_frozen": r["next_boundary"], "within_one": int(abs(i - r["test_boundary"]) <= 1)}
            for r, i in zip(rows, ideal)]


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: row[c] for c in columns})


def write_report(run_dir, out_dir=None) -> dict:
    """Write intervals.csv, summary.json and svcca_vs_online.csv; return the summary."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"run directory {run_dir} does not exist")
    cfg_path = run_dir / "config.txt"
    if not cfg_path.is_file():
        raise ReportError(f"{run_dir} has no config.txt")
    cfg = parse_config(cfg_path.read_text())
    rows = load_rows(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)

    oracle = oracle_rows(run_dir, rows, cfg.svcca_threshold, cfg.svcca_variance)
    _write_csv(out / "intervals.csv", INTERVAL_COLUMNS, rows)
    _write_csv(out / "svcca_vs_online.csv", ORACLE_COLUMNS, oracle)

    summary_path = run_dir / "run_summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.is_file() else {}
    summary["intervals"] = len(rows)
    summary["oracle_tracking"] = (tracking_fraction([r["online_frozen"] for r in oracle],
                                                    [r["ideal_frozen"] for r in oracle])
                                  if oracle else None)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
