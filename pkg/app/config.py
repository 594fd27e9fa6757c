# config.py
"""
Defaults and the TOML run configuration.

A run file has flat keys (experiment, seed, alpha, workers, out, cache_dir)
and one table per concern. Every table is merged over its defaults below and
checked field by field; a bad field raises ConfigError with file, line and
field so the message points at the offending line.
"""

import hashlib
import json
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path

from errors import ConfigError
from presets import CUTOFF_PRESETS, POTENTIAL_PRESETS, resolve_preset

default_out = "runs"
default_cache_dir = "cache"
default_workers = 1

DEFAULT_POTENTIAL = {"preset": "harmonic"}
DEFAULT_CUTOFF = {"model": "standard", "cutoff": 1.0, "profile": "sharp", "omega_power": 1.0,
                  "amplitude": 1.0, "k_min": 0.0, "order": 8}
DEFAULT_DISPERSION = {"d": 1, "m": 0.0, "m_list": []}
DEFAULT_TIME = {"t": 1.0, "dt_max": 0.01, "t_list": [0.5, 1.0, 1.5, 2.0], "t_iter": 1.0}
DEFAULT_SAMPLES = {"n": 10000, "mc": 2000, "field_draws": 1000}
DEFAULT_KATO = {"radii": [0.1, 0.05, 0.025, 0.0125], "t_list": [0.1, 0.02, 0.004, 0.001], "mc": 1000}
DEFAULT_DECAY = {"case": "auto", "n": 1, "gamma": 0.5, "K_radius": 0.0, "alpha_exp": 0.4, "beta": 0.5,
                 "window": [1.5, 3.0], "x_extent": 4.0, "x_points": 81, "n_iter": 20, "rule": "singular",
                 "spike_radius": 1.0, "constants": "khasminskii", "E": None, "c_level": None, "eps": None}
DEFAULT_SCATTERING = {"k": [1.0, 0.0, 0.0], "h": 0.25, "half_width": None, "method": "auto", "order": 4,
                      "far_radius": [10.0, 20.0]}
DEFAULT_LAWS = {"pairs": [[0.25, 0.25], [0.5, 1.0]], "width": 1.0, "shift": 0.5, "x_extent": 6.0, "x_points": 121}

SECTIONS = {
    "potential": DEFAULT_POTENTIAL,
    "cutoff": DEFAULT_CUTOFF,
    "dispersion": DEFAULT_DISPERSION,
    "time": DEFAULT_TIME,
    "samples": DEFAULT_SAMPLES,
    "kato": DEFAULT_KATO,
    "decay": DEFAULT_DECAY,
    "scattering": DEFAULT_SCATTERING,
    "laws": DEFAULT_LAWS,
}
TOP_LEVEL = ("experiment", "seed", "alpha", "workers", "out", "cache_dir")


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    seed: int
    alpha: float
    workers: int
    out: str
    cache_dir: str
    potential: dict
    cutoff: dict
    dispersion: dict
    time: dict
    samples: dict
    kato: dict
    decay: dict
    scattering: dict
    laws: dict
    text: str = field(default="", repr=False, compare=False)
    path: str = "<string>"

    @property
    def d(self):
        return self.dispersion["d"]

    def resolved(self):
        """Everything that determines the results; workers and out are left out."""
        return {"experiment": self.experiment, "seed": self.seed, "alpha": self.alpha,
                **{name: getattr(self, name) for name in SECTIONS}}

    def config_hash(self):
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, seed=None, workers=None, out=None):
        changes = {}
        if seed is not None:
            changes["seed"] = _check_seed(seed, self.path, None)
        if workers is not None:
            changes["workers"] = workers
        if out is not None:
            changes["out"] = str(out)
        return replace(self, **changes)


def _line_of(text, section, key):
    """1-based line of `key = ...` inside [section] (top level for section None)."""
    current = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r"^\[([^\[\]]+)\]$", stripped)
        if header:
            current = header.group(1).strip()
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return number
    return None


def _fail(message, path, text, section, key):
    name = key if section is None else f"{section}.{key}"
    raise ConfigError(message, path, _line_of(text, section, key) if text else None, name)


def _check_seed(value, path, text):
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2 ** 64:
        _fail("must be an integer in [0, 2^64)", path, text, None, "seed")
    return value


def _number(table, key, section, path, text, minimum=None, positive=False, integer=False):
    value = table[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail("must be a number", path, text, section, key)
    if integer and int(value) != value:
        _fail("must be an integer", path, text, section, key)
    if positive and not value > 0:
        _fail("must be > 0", path, text, section, key)
    if minimum is not None and value < minimum:
        _fail(f"must be >= {minimum}", path, text, section, key)
    return int(value) if integer else float(value)


def _numbers(table, key, section, path, text, length=None, positive=False):
    values = table[key]
    if not isinstance(values, list) or not values or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in values):
        _fail("must be a non-empty list of numbers", path, text, section, key)
    if length is not None and len(values) != length:
        _fail(f"must hold {length} numbers", path, text, section, key)
    if positive and any(not v > 0 for v in values):
        _fail("must hold positive numbers", path, text, section, key)
    return [float(v) for v in values]


def _choice(table, key, section, path, text, choices):
    if table[key] not in choices:
        _fail(f"must be one of {', '.join(choices)}", path, text, section, key)
    return table[key]


def _merged(data, section, path, text):
    given = data.get(section, {})
    if not isinstance(given, dict):
        _fail("must be a table", path, text, None, section)
    defaults = SECTIONS[section]
    # Potential and cutoff tables are resolved through presets before defaults apply.
    if section in ("potential", "cutoff"):
        return dict(given) if given else dict(defaults)
    unknown = set(given) - set(defaults)
    if unknown:
        _fail("unknown field", path, text, section, sorted(unknown)[0])
    return {**defaults, **given}


def parse_config(text, path="<string>"):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as error:
        line = re.search(r"line (\d+)", str(error))
        raise ConfigError(f"not valid TOML: {error}", path, int(line.group(1)) if line else None) from None

    for key in data:
        if key not in TOP_LEVEL and key not in SECTIONS:
            _fail("unknown field", path, text, None, key)
    if "seed" not in data:
        raise ConfigError("a seed is required (no wall-clock default)", path, None, "seed")
    seed = _check_seed(data["seed"], path, text)
    top = {"alpha": 0.0, "workers": default_workers, "out": default_out, "cache_dir": default_cache_dir, **data}
    alpha = _number(top, "alpha", None, path, text, minimum=0.0)
    workers = _number(top, "workers", None, path, text, positive=True, integer=True)

    sections = {name: _merged(data, name, path, text) for name in SECTIONS}

    disp = sections["dispersion"]
    disp["d"] = _number(disp, "d", "dispersion", path, text, positive=True, integer=True)
    if disp["d"] > 3:
        _fail("must be 1, 2 or 3", path, text, "dispersion", "d")
    disp["m"] = _number(disp, "m", "dispersion", path, text, minimum=0.0)
    if disp["m_list"]:
        disp["m_list"] = _numbers(disp, "m_list", "dispersion", path, text)
        if any(m < 0 for m in disp["m_list"]):
            _fail("masses must be >= 0", path, text, "dispersion", "m_list")

    for section, presets in (("potential", POTENTIAL_PRESETS), ("cutoff", CUTOFF_PRESETS)):
        try:
            sections[section] = resolve_preset(sections[section], presets)
        except KeyError as missing:
            _fail(f"unknown preset {missing.args[0]!r}", path, text, section, "preset")
    if "form" not in sections["potential"]:
        _fail("needs a form or a preset", path, text, None, "potential")
    sections["cutoff"] = {**DEFAULT_CUTOFF, **sections["cutoff"]}

    cutoff = sections["cutoff"]
    _choice(cutoff, "model", "cutoff", path, text, ("standard", "variable_mass", "none"))
    if cutoff["model"] != "none":
        cutoff["cutoff"] = _number(cutoff, "cutoff", "cutoff", path, text, positive=True)
        cutoff["order"] = _number(cutoff, "order", "cutoff", path, text, positive=True, integer=True)
        _choice(cutoff, "profile", "cutoff", path, text, ("sharp", "gaussian"))
    if alpha > 0 and cutoff["model"] == "none":
        _fail("alpha > 0 needs a cutoff model", path, text, None, "alpha")

    time = sections["time"]
    time["t"] = _number(time, "t", "time", path, text, positive=True)
    time["dt_max"] = _number(time, "dt_max", "time", path, text, positive=True)
    time["t_iter"] = _number(time, "t_iter", "time", path, text, positive=True)
    time["t_list"] = _numbers(time, "t_list", "time", path, text, positive=True)
    if len(time["t_list"]) < 3:
        _fail("needs at least three times", path, text, "time", "t_list")

    samples = sections["samples"]
    for key in ("n", "mc", "field_draws"):
        samples[key] = _number(samples, key, "samples", path, text, positive=True, integer=True)

    kato = sections["kato"]
    kato["radii"] = _numbers(kato, "radii", "kato", path, text, positive=True)
    kato["t_list"] = _numbers(kato, "t_list", "kato", path, text, positive=True)
    kato["mc"] = _number(kato, "mc", "kato", path, text, positive=True, integer=True)

    decay = sections["decay"]
    _choice(decay, "case", "decay", path, text, ("auto", "confining1", "confining2", "nonconfining"))
    _choice(decay, "rule", "decay", path, text, ("singular", "negative", "none"))
    _choice(decay, "constants", "decay", path, text, ("khasminskii", "lp"))
    alpha_exp = _number(decay, "alpha_exp", "decay", path, text, positive=True)
    if alpha_exp >= 0.5:
        _fail("must lie in (0, 1/2)", path, text, "decay", "alpha_exp")
    beta = _number(decay, "beta", "decay", path, text, positive=True)
    if beta >= 1.0:
        _fail("must lie in (0, 1)", path, text, "decay", "beta")
    decay["window"] = _numbers(decay, "window", "decay", path, text, length=2)
    if not 0 <= decay["window"][0] < decay["window"][1] <= decay["x_extent"]:
        _fail("must satisfy 0 <= inner < outer <= x_extent", path, text, "decay", "window")
    decay["x_points"] = _number(decay, "x_points", "decay", path, text, positive=True, integer=True)
    decay["n_iter"] = _number(decay, "n_iter", "decay", path, text, positive=True, integer=True)
    for key in ("E", "c_level", "eps"):
        if decay[key] is not None:
            decay[key] = _number(decay, key, "decay", path, text, positive=key == "eps")

    scattering = sections["scattering"]
    scattering["k"] = _numbers(scattering, "k", "scattering", path, text, length=3)
    scattering["h"] = _number(scattering, "h", "scattering", path, text, positive=True)
    if scattering["half_width"] is not None:
        scattering["half_width"] = _number(scattering, "half_width", "scattering", path, text, positive=True)
    scattering["order"] = _number(scattering, "order", "scattering", path, text, positive=True, integer=True)
    scattering["far_radius"] = _numbers(scattering, "far_radius", "scattering", path, text, positive=True)
    _choice(scattering, "method", "scattering", path, text, ("auto", "born", "collocation"))

    laws = sections["laws"]
    for pair in laws["pairs"]:
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(v, (int, float)) and v >= 0 for v in pair)):
            _fail("must be a list of [s, t] pairs with s, t >= 0", path, text, "laws", "pairs")
    laws["width"] = _number(laws, "width", "laws", path, text, positive=True)

    return RunConfig(
        experiment=str(top.get("experiment", Path(path).stem)),
        seed=seed,
        alpha=alpha,
        workers=workers,
        out=str(top["out"]),
        cache_dir=str(top["cache_dir"]),
        text=text,
        path=str(path),
        **sections,
    )


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigError(f"cannot read config: {error.strerror}", str(path)) from None
    return parse_config(text, str(path))
