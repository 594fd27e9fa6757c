# cache_helpers.py
"""
On-disk memo for expensive tables (variable-mass cutoff tables), keyed by the
sha256 of the canonical JSON of everything they depend on:
cache_dir/<key>.json (header) and cache_dir/<key>.csv (rows).
"""

import hashlib
import json
import logging
from pathlib import Path


def cache_key(spec):
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def cache_paths(cache_dir, spec):
    key = cache_key(spec)
    root = Path(cache_dir)
    return root / f"{key}.csv", root / f"{key}.json"


def load_or_build(cache_dir, spec, build, write, read):
    """
    read(csv, json) when both files for spec exist, else build() and
    write(result, csv, json). Returns (result, hit).
    """
    csv_path, json_path = cache_paths(cache_dir, spec)
    if csv_path.exists() and json_path.exists():
        logging.info("Cache hit %s", csv_path.stem[:12])
        return read(csv_path, json_path), True
    result = build()
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write(result, csv_path, json_path)
    logging.info("Cached %s", csv_path.stem[:12])
    return result, False


def bust(cache_dir, spec):
    for path in cache_paths(cache_dir, spec):
        path.unlink(missing_ok=True)
