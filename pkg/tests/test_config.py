import pytest

from config import DEFAULT_CUTOFF, load_config, parse_config
from errors import ConfigError
from presets import POTENTIAL_PRESETS, resolve_preset

MINIMAL = """\
seed = 42
"""


def test_minimal_config_uses_defaults():
    cfg = parse_config(MINIMAL, "run.toml")
    assert cfg.seed == 42
    assert cfg.d == 1
    assert cfg.potential == POTENTIAL_PRESETS["harmonic"]
    assert cfg.cutoff["order"] == DEFAULT_CUTOFF["order"]
    assert cfg.experiment == "run"
    assert cfg.workers == 1


def test_missing_seed_is_an_error():
    with pytest.raises(ConfigError) as info:
        parse_config("alpha = 0.0\n", "run.toml")
    assert info.value.field == "seed"


def test_error_names_line_and_field():
    text = "seed = 1\n\n[time]\nt = 1.0\ndt_max = -0.5\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.toml")
    assert info.value.line == 5
    assert info.value.field == "time.dt_max"
    assert str(info.value).startswith("run.toml:5: field 'time.dt_max'")


def test_unknown_field():
    with pytest.raises(ConfigError) as info:
        parse_config("seed = 1\n[samples]\nn = 10\nnn = 3\n", "run.toml")
    assert info.value.field == "samples.nn"
    assert info.value.line == 4


def test_unknown_preset():
    with pytest.raises(ConfigError) as info:
        parse_config('seed = 1\n[potential]\npreset = "anharmonic"\n', "run.toml")
    assert info.value.field == "potential.preset"
    assert info.value.line == 3


def test_alpha_needs_a_cutoff():
    with pytest.raises(ConfigError) as info:
        parse_config('seed = 1\nalpha = 0.5\n[cutoff]\npreset = "none"\n', "run.toml")
    assert info.value.field == "alpha"


def test_seed_range():
    with pytest.raises(ConfigError):
        parse_config(f"seed = {2 ** 64}\n", "run.toml")
    with pytest.raises(ConfigError):
        parse_config("seed = -1\n", "run.toml")


def test_bad_toml_reports_a_line():
    with pytest.raises(ConfigError) as info:
        parse_config("seed = 1\n[time\n", "run.toml")
    assert "not valid TOML" in str(info.value)


def test_presets_resolve_with_overrides():
    cfg = parse_config('seed = 1\n[potential]\npreset = "coulomb"\nb = 0.5\n[cutoff]\npreset = "smooth"\n'
                       "[dispersion]\nd = 3\n", "run.toml")
    assert cfg.potential == {"form": "coulomb", "a": 1.0, "b": 0.5}
    assert cfg.cutoff["profile"] == "gaussian"
    assert cfg.cutoff["omega_power"] == DEFAULT_CUTOFF["omega_power"]
    with pytest.raises(KeyError):
        resolve_preset({"preset": "nothing"}, POTENTIAL_PRESETS)


def test_config_hash_ignores_workers_and_out():
    a = parse_config("seed = 5\n", "a.toml")
    b = parse_config('seed = 5\nworkers = 8\nout = "elsewhere"\n', "a.toml")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != parse_config("seed = 6\n", "a.toml").config_hash()
    assert a.with_overrides(seed=6).config_hash() == parse_config("seed = 6\n", "a.toml").config_hash()


def test_decay_window_must_fit_the_grid():
    with pytest.raises(ConfigError) as info:
        parse_config("seed = 1\n[decay]\nwindow = [1.0, 9.0]\n", "run.toml")
    assert info.value.field == "decay.window"


def test_load_config_reads_files(write_config):
    path = write_config("""
        seed = 3
        experiment = "harmonic"

        [samples]
        n = 500
    """)
    cfg = load_config(path)
    assert cfg.samples["n"] == 500
    assert cfg.experiment == "harmonic"
    assert cfg.text.startswith("seed = 3")
    with pytest.raises(ConfigError):
        load_config(path.parent / "missing.toml")
