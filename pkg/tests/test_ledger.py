import json

import numpy as np

import ledger
from cache_helpers import bust, cache_key, cache_paths, load_or_build
from labeling import generate_label


def test_digest_ignores_the_timestamp():
    report = {"op": "kato", "value": 1.5}
    assert ledger.digest({**report, "timestamp": "a"}) == ledger.digest({**report, "timestamp": "b"})
    assert ledger.digest(report) != ledger.digest({**report, "value": 1.25})


def test_canonical_json_handles_numpy_and_non_finite():
    text = ledger.canonical_json({"b": np.float64("nan"), "a": np.arange(3), "c": float("-inf")})
    data = json.loads(text)
    assert data == {"a": [0, 1, 2], "b": "nan", "c": "-inf"}
    assert text.index('"a"') < text.index('"b"')


def test_write_report(tmp_path):
    path, digest = ledger.write_report(tmp_path / "out", "energy", {"E0": 0.5}, "abc")
    stored = ledger.read_report(path)
    assert stored["config_hash"] == "abc"
    assert "timestamp" in stored
    assert digest == ledger.digest(stored)
    _, again = ledger.write_report(tmp_path / "out", "energy", {"E0": 0.5}, "abc")
    assert again == digest


def test_write_csv_keeps_exact_floats(tmp_path):
    path = tmp_path / "profile.csv"
    value = 0.1 + 0.2
    digest = ledger.write_csv(path, ("x0", "value"), [(np.float64(1.0), value)])
    assert digest == ledger.file_digest(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["x0,value", f"1.0,{value!r}"]


def test_ledger_entries_accumulate(tmp_path):
    assert ledger.read_entries(tmp_path) == []
    ledger.append_entry(tmp_path, {"op": "kato", "seed": 1})
    ledger.append_entry(tmp_path, {"op": "energy", "seed": 2, "timing": np.float64(0.25)})
    entries = ledger.read_entries(tmp_path)
    assert [e["op"] for e in entries] == ["kato", "energy"]
    assert entries[1]["timing"] == 0.25


def test_cache_builds_once(tmp_path):
    calls = []

    def build():
        calls.append(1)
        return "table"

    def write(result, csv_path, json_path):
        csv_path.write_text(result, encoding="utf-8")
        json_path.write_text("{}", encoding="utf-8")

    def read(csv_path, json_path):
        return csv_path.read_text(encoding="utf-8")

    spec = {"h": 0.5, "order": 2}
    assert load_or_build(tmp_path, spec, build, write, read) == ("table", False)
    assert load_or_build(tmp_path, spec, build, write, read) == ("table", True)
    assert len(calls) == 1
    assert cache_key(spec) == cache_key({"order": 2, "h": 0.5})
    bust(tmp_path, spec)
    assert not any(p.exists() for p in cache_paths(tmp_path, spec))


def test_labels():
    assert generate_label({"type": "potential", "name": "harmonic", "d": 1, "declared_class": "confining"}) \
        == "harmonic (d=1, confining)"
    assert generate_label({"type": "kernel", "model": None}) == "no field (alpha=0)"
    assert generate_label({"type": "run", "op": "kato", "experiment": "x", "seed": 3}) == "kato x seed=3"
    assert generate_label({"label": "custom"}) == "custom"
