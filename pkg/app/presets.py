# presets.py
"""Named potential and cutoff tables that run configs can refer to with `preset = "..."`."""

POTENTIAL_PRESETS = {
    "zero": {"form": "constant", "c": 0.0},
    "harmonic": {"form": "harmonic", "omega": 1.0},
    "quadratic": {"form": "polynomial", "coeffs": [0.0, 0.0, 1.0]},
    "coulomb": {"form": "coulomb", "a": 1.0, "b": 1.0},
    "coulomb_strong": {"form": "coulomb", "a": 1.0, "b": 2.5},
    "truncated_coulomb": {"form": "coulomb", "a": 1.0, "b": 1.0, "cutoff": 1.0},
    "weak_well": {"form": "gaussian_well", "depth": 0.5, "width": 1.0, "truncate": 3.5},
    "square_well": {"form": "square_well", "depth": 1.0, "radius": 1.0},
    "log_confining": {"form": "log_confining", "lam": 5.0},
    "hydrogen_trap": {"form": "sum", "terms": [{"form": "harmonic", "omega": 0.5},
                                               {"form": "coulomb", "a": 1.0, "b": 1.0}]},
}

CUTOFF_PRESETS = {
    "none": {"model": "none"},
    "sharp": {"model": "standard", "cutoff": 1.0, "profile": "sharp"},
    "smooth": {"model": "standard", "cutoff": 1.0, "profile": "gaussian"},
    "infrared_free": {"model": "standard", "cutoff": 1.0, "profile": "sharp", "k_min": 0.1},
    "variable_mass": {"model": "variable_mass", "cutoff": 1.0, "profile": "sharp", "k_min": 0.25,
                      "scatterer": {"form": "gaussian_well", "depth": 0.5, "width": 1.0, "truncate": 3.5}},
}

PRESET_NAMES = sorted(set(POTENTIAL_PRESETS) | set(CUTOFF_PRESETS))


def resolve_preset(table, presets):
    """The preset's table with the remaining keys of table laid over it; KeyError on an unknown name."""
    if "preset" not in table:
        return dict(table)
    name = table["preset"]
    if name not in presets:
        raise KeyError(name)
    overrides = {key: value for key, value in table.items() if key != "preset"}
    return {**presets[name], **overrides}
