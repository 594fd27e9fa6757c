# ledger.py
"""
Persistence for run outputs.

Reports are UTF-8 JSON with sorted keys; their digest is taken with the
timestamp removed so a replay under the same config and seed reproduces it.
Profiles and tables are CSV with repr-exact floats. Every run appends one
line to ledger.jsonl in the output directory.
"""

import csv
import hashlib
import json
import logging
import math
import threading
import time
from pathlib import Path

import numpy as np

LEDGER_NAME = "ledger.jsonl"

# Serializes appends from concurrent commands.
ledger_lock = threading.Lock()


def _plain(value):
    """JSON form of numpy scalars and arrays; non-finite floats as strings."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return _plain(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def canonical_json(obj):
    return json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def digest(report):
    body = {k: v for k, v in report.items() if k != "timestamp"}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def write_report(out_dir, name, report, config_hash):
    """Write <out_dir>/<name>.json with config_hash and timestamp; return (path, digest)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {**report, "config_hash": config_hash, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    path = out_dir / f"{name}.json"
    path.write_text(canonical_json(report), encoding="utf-8")
    return path, digest(report)


def read_report(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def file_digest(path):
    with Path(path).open("rb") as handle:
        return hashlib.sha256(handle.read()).hexdigest()


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return file_digest(path)


def append_entry(out_dir, entry):
    path = Path(out_dir) / LEDGER_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(_plain(entry), sort_keys=True, ensure_ascii=False)
    with ledger_lock:
        with path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")
    logging.info("Ledger entry %s appended to %s", entry.get("op"), path)


def read_entries(out_dir):
    path = Path(out_dir) / LEDGER_NAME
    if not path.exists():
        return []
    with path.open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
