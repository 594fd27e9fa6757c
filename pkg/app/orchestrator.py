#!/usr/bin/env python3
"""
orchestrator.py

This module turns a RunConfig into the objects the simulation modules need,
runs one operation and delegates persistence to ledger.py. A global lock
keeps two runs from interleaving their ledger entries and output files.
"""

import logging
import threading
import time
from pathlib import Path

import numpy as np

import ledger
from cache_helpers import load_or_build
from config import parse_config
from decay import (carmona_constants, check_bound_chain, envelope_confining1, envelope_confining2,
                   envelope_nonconfining, nonconfining_decomposition, profile_bound_state, verify_envelope)
from errors import GrowthViolation, SimulationError
from fieldkernel import DispersionSpec, FieldKernel, StandardCutoff, build_kernel, mode_sample_check
from labeling import generate_label
from paths import SeedSpec, TimeGrid, sample_path
from potentials import DecompositionHints, build_potential, decompose_E, kato_report, sigma_liminf
from scattering import (ScatteringProblem, build_variable_mass_cutoff, decay_constant, helmholtz_residual,
                        read_tables, solve_ls, write_tables)
from semigroup import (check_diamagnetic, check_positivity, check_semigroup, check_semigroup_split, check_symmetry,
                       gaussian, ground_energy, matrix_element)

# Global lock to prevent overlapping runs.
run_lock = threading.Lock()

Z_LIMIT = 3.0
# Reported with their z but never failing a run.
DIAGNOSTIC_LAWS = ("semigroup_reduced",)
LS_RESIDUAL_MAX = 1e-6
SIGMA_RADII = (10.0, 20.0, 40.0, 80.0)


def potential_from(cfg, table=None, d=None):
    return build_potential(table if table is not None else cfg.potential, d or cfg.d)


def _standard_cutoff(cfg, d):
    c = cfg.cutoff
    return StandardCutoff(d, c["cutoff"], c["profile"], c.get("omega_power", 1.0), c.get("amplitude", 1.0),
                          c.get("k_min", 0.0))


def cutoff_tables(cfg, disp, v):
    """Variable-mass tables with v as scatterer, through the on-disk cache."""
    sc = cfg.scattering
    problem = ScatteringProblem(v, sc["k"], sc["h"], sc["half_width"])
    profile = _standard_cutoff(cfg, 3)
    spec = {"scatterer": v.params, "h": sc["h"], "half_width": sc["half_width"], "cutoff": profile.spec(),
            "m": disp.m, "order": sc["order"], "method": sc["method"]}
    tables, _ = load_or_build(
        cfg.cache_dir, spec,
        lambda: build_variable_mass_cutoff(problem, profile, disp, sc["order"], sc["method"], cfg.workers),
        write_tables, read_tables)
    return tables, profile


def kernel_from(cfg, m=None):
    """FieldKernel for the configured cutoff, or None when no field is coupled."""
    if cfg.alpha == 0.0 or cfg.cutoff["model"] == "none":
        return None
    disp = DispersionSpec(cfg.d, cfg.dispersion["m"] if m is None else m)
    if cfg.cutoff["model"] == "variable_mass":
        if cfg.d != 3:
            raise ValueError("variable-mass cutoffs are three-dimensional")
        scatterer = potential_from(cfg, cfg.cutoff.get("scatterer", cfg.potential), 3)
        tables, profile = cutoff_tables(cfg, disp, scatterer)
        model = tables.to_model(profile)
        return FieldKernel(model, disp, model.modes(disp, cfg.scattering["order"]),
                           {"order": cfg.scattering["order"], "source": "table"})
    rtol = cfg.cutoff.get("rtol")
    if rtol is None:
        return build_kernel(_standard_cutoff(cfg, cfg.d), disp, cfg.cutoff["order"])
    return build_kernel(_standard_cutoff(cfg, cfg.d), disp, cfg.cutoff["order"], rtol)


def _kernel_label(cfg, m=None):
    return generate_label({"type": "kernel", "model": cfg.cutoff["model"] if cfg.alpha > 0 else None,
                           "cutoff": cfg.cutoff.get("cutoff"), "order": cfg.cutoff.get("order"),
                           "m": cfg.dispersion["m"] if m is None else m})


def _potential_label(V):
    return generate_label({"type": "potential", "name": V.name, "d": V.dim, "declared_class": V.declared_class})


def _axes(extent, points, d):
    return tuple(np.linspace(-extent, extent, points) for _ in range(d))


def _seed(cfg):
    return SeedSpec(cfg.seed)


def _write(cfg, outputs, name, report):
    _, digest = ledger.write_report(cfg.out, name, report, cfg.config_hash())
    outputs[f"{name}.json"] = digest


def cmd_kato(cfg):
    """Kato report; exit code 2 when the verdict is inconclusive."""
    V = potential_from(cfg)
    report = kato_report(V, _seed(cfg), cfg.kato["radii"], cfg.kato["t_list"], mc=cfg.kato["mc"],
                         workers=cfg.workers)
    outputs = {}
    _write(cfg, outputs, "kato", {"op": "kato", "label": _potential_label(V), "report": report.to_dict()})
    return outputs, 0 if report.verdict != "inconclusive" else 2


def cmd_ls(cfg):
    """Lippmann-Schwinger solve for [potential] at the configured k, then the variable-mass tables."""
    if cfg.d != 3:
        raise ValueError("the Lippmann-Schwinger solver needs [dispersion] d = 3")
    sc = cfg.scattering
    v = potential_from(cfg, d=3)
    problem = ScatteringProblem(v, sc["k"], sc["h"], sc["half_width"])
    sol = solve_ls(problem, sc["method"])
    axes = np.vstack([np.eye(3), -np.eye(3)])
    far = {repr(float(R)): decay_constant(sol, problem, R * axes) for R in sc["far_radius"]}

    tables, _ = cutoff_tables(cfg, DispersionSpec(3, cfg.dispersion["m"]), v)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tables(tables, out / "tables.csv", out / "tables.header.json")
    outputs = {"tables.csv": ledger.file_digest(out / "tables.csv"),
               "tables.header.json": ledger.file_digest(out / "tables.header.json")}
    report = {
        "op": "ls",
        "label": generate_label({"type": "table", "h": sc["h"], "order": sc["order"]}),
        "potential": _potential_label(v),
        "method": sol.method,
        "iterations": sol.iterations,
        "condition": sol.condition,
        "residual": sol.residual_norm,
        "residual_ok": sol.residual_norm < LS_RESIDUAL_MAX,
        "born_norm": sol.born_norm,
        "helmholtz_residual": helmholtz_residual(sol, problem),
        "decay_constants": far,
        "table_header": tables.header,
    }
    _write(cfg, outputs, "ls", report)
    return outputs, 0


def _test_function(cfg, shift=0.0):
    center = np.zeros(cfg.d)
    center[0] = shift
    return gaussian(center, cfg.laws["width"])


def _energy(cfg, V, kernel):
    return ground_energy(_test_function(cfg), V, kernel, cfg.alpha, cfg.time["t_list"], cfg.samples["n"], _seed(cfg),
                         cfg.time["dt_max"], workers=cfg.workers)


def cmd_energy(cfg):
    """Ground energy; with dispersion.m_list also the sweep over field masses."""
    V = potential_from(cfg)
    estimate = _energy(cfg, V, kernel_from(cfg))
    report = {"op": "energy", "label": _potential_label(V), "kernel": _kernel_label(cfg), "alpha": cfg.alpha,
              "estimate": estimate.to_dict()}
    if cfg.dispersion["m_list"]:
        sweep = []
        for m in sorted(cfg.dispersion["m_list"]):
            e = _energy(cfg, V, kernel_from(cfg, m))
            sweep.append({"m": m, "E0": e.E0, "E0_stderr": e.E0_stderr})
        # E_m should not increase with m beyond the combined error bars.
        report["mass_sweep"] = sweep
        report["monotone_in_m"] = all(b["E0"] <= a["E0"] + 3.0 * (a["E0_stderr"] ** 2 + b["E0_stderr"] ** 2) ** 0.5
                                      for a, b in zip(sweep[:-1], sweep[1:]))
    outputs = {}
    _write(cfg, outputs, "energy", report)
    return outputs, 0


def _envelope(cfg, decomp, E):
    """(envelope, decomposition its constants refer to) for the configured case."""
    dc = cfg.decay
    case = dc["case"]
    if case == "auto":
        sigma = sigma_liminf(decomp, SIGMA_RADII)
        if not sigma.unbounded:
            case = "nonconfining"
        else:
            try:
                return envelope_confining1(decomp, E, dc["n"], dc["gamma"], dc["K_radius"], dc["alpha_exp"]), decomp
            except GrowthViolation as failure:
                logging.info("%s; trying confining case 2", failure)
                case = "confining2"
    if case == "confining1":
        return envelope_confining1(decomp, E, dc["n"], dc["gamma"], dc["K_radius"], dc["alpha_exp"]), decomp
    if case == "confining2":
        return envelope_confining2(decomp, E, dc["c_level"], dc["eps"], dc["alpha_exp"]), decomp
    env = envelope_nonconfining(decomp, E, dc["beta"], R_list=SIGMA_RADII)
    return env, nonconfining_decomposition(decomp, E, env.params["sigma"])


def _profile(cfg, V, kernel, E):
    dc = cfg.decay
    return profile_bound_state(V, kernel, cfg.alpha, E, _axes(dc["x_extent"], dc["x_points"], cfg.d),
                               cfg.time["t_iter"], dc["n_iter"], cfg.samples["mc"], _seed(cfg),
                               dt_max=cfg.time["dt_max"], workers=cfg.workers)


def cmd_decay(cfg):
    """Envelope for the configured case, a bound-state profile and the pointwise comparison."""
    dc = cfg.decay
    V = potential_from(cfg)
    kernel = kernel_from(cfg)
    E = dc["E"] if dc["E"] is not None else _energy(cfg, V, kernel).E0
    decomp = decompose_E(V, DecompositionHints(rule=dc["rule"], spike_radius=dc["spike_radius"]))
    env, decomp = _envelope(cfg, decomp, E)
    profile = _profile(cfg, V, kernel, E)
    report = verify_envelope(profile, env, dc["window"])
    constants = carmona_constants(decomp, env.params.get("alpha_exp", dc["alpha_exp"]), _seed(cfg),
                                  cfg.kato["mc"], dc["constants"], cfg.workers)
    report.update({
        "op": "decay",
        "label": generate_label({"type": "envelope", **env.to_dict()}),
        "envelope": env.to_dict(),
        "E": E,
        "W_inf": decomp.W_inf,
        "U_p_norm": decomp.U_p_norm,
        "carmona": constants.to_dict(),
        "bound_chain_violations": check_bound_chain(profile, env, decomp, constants),
        "profile": {"n_iterations": profile.n_iterations, "converged": profile.converged, "t_iter": profile.t_iter},
    })

    if cfg.dispersion["m_list"] and kernel is not None:
        # One envelope for every mass: C1 is the largest calibrated at any m.
        runs = []
        for m in sorted(cfg.dispersion["m_list"]):
            k_m = kernel_from(cfg, m)
            E_m = _energy(cfg, V, k_m).E0
            runs.append((m, E_m, _profile(cfg, V, k_m, E_m)))
        checks = [(m, E_m, verify_envelope(p, env, dc["window"])) for m, E_m, p in runs]
        shared = env.with_C1(max(c["constants"]["C1"] for _, _, c in checks))
        report["mass_sweep"] = [
            {"m": m, "E": E_m, "C1_own": c["constants"]["C1"],
             "violations": verify_envelope(p, shared, dc["window"], calibrate=False)["violations"]}
            for (m, E_m, p), (_, _, c) in zip(runs, checks)
        ]
        report["shared_C1"] = shared.C1

    outputs = {}
    header = tuple(f"x{i}" for i in range(cfg.d)) + ("value", "stderr")
    outputs["profile.csv"] = ledger.write_csv(Path(cfg.out) / "profile.csv", header, profile.rows())
    _write(cfg, outputs, "decay", report)
    return outputs, 0


def cmd_laws(cfg):
    """Semigroup, symmetry, diamagnetic and positivity checks, plus the vacuum-reduction oracle."""
    V = potential_from(cfg)
    kernel = kernel_from(cfg)
    lw, seed, n = cfg.laws, _seed(cfg), cfg.samples["n"]
    f, g = _test_function(cfg), _test_function(cfg, lw["shift"])
    axes = _axes(lw["x_extent"], lw["x_points"], cfg.d)
    coupled = kernel is not None and cfg.alpha > 0.0
    rows = []
    for s, t in lw["pairs"]:
        sg = check_semigroup(f, g, s, t, V, kernel, cfg.alpha, axes, n, cfg.samples["mc"], seed,
                             cfg.time["dt_max"], workers=cfg.workers)
        sym = check_symmetry(f, g, s + t, V, kernel, cfg.alpha, n, seed, cfg.time["dt_max"], workers=cfg.workers)
        if coupled:
            # The nested table drops the field correlation across s; only the joined-path law gates.
            split = check_semigroup_split(f, g, s, t, V, kernel, cfg.alpha, n, seed, cfg.time["dt_max"],
                                          workers=cfg.workers)
            rows.append({"law": "semigroup", "s": s, "t": t, "lhs": split.lhs, "rhs": split.rhs,
                         "z": split.z_score})
            rows.append({"law": "semigroup_reduced", "s": s, "t": t, "lhs": sg.lhs, "rhs": sg.rhs,
                         "z": sg.z_score})
        else:
            rows.append({"law": "semigroup", "s": s, "t": t, "lhs": sg.lhs, "rhs": sg.rhs, "z": sg.z_score})
        rows.append({"law": "symmetry", "s": 0.0, "t": s + t, "lhs": sym.lhs, "rhs": sym.rhs, "z": sym.z_score})

    t = cfg.time["t"]
    dia = check_diamagnetic(f, g, t, V, kernel, cfg.alpha, n, seed, cfg.time["dt_max"], workers=cfg.workers)
    weights = matrix_element(f, g, t, V, kernel, cfg.alpha, n, seed, cfg.time["dt_max"], workers=cfg.workers).weights
    report = {
        "op": "laws",
        "label": _potential_label(V),
        "kernel": _kernel_label(cfg),
        "rows": rows,
        "diagnostic_laws": [law for law in DIAGNOSTIC_LAWS if any(r["law"] == law for r in rows)],
        "diamagnetic": dia.to_dict(),
        "positivity": check_positivity(weights),
    }
    if kernel is not None and isinstance(kernel.model, StandardCutoff):
        path = sample_path(np.zeros(cfg.d), TimeGrid(t, 16), seed)
        check = mode_sample_check(path, kernel.model, kernel.disp, cfg.alpha, cfg.cutoff["order"],
                                  cfg.samples["field_draws"], seed.offset(n), cfg.workers)
        report["vacuum_reduction"] = {"closed_form": check.closed_form, "sampled": check.sampled,
                                      "stderr": check.stderr, "z": check.z_score}

    gating = [row for row in rows if row["law"] not in DIAGNOSTIC_LAWS]
    passed = all(abs(row["z"]) < Z_LIMIT for row in gating) and dia.holds and report["positivity"]
    outputs = {}
    outputs["laws.csv"] = ledger.write_csv(Path(cfg.out) / "laws.csv", ("law", "s", "t", "lhs", "rhs", "z"),
                                           [(r["law"], r["s"], r["t"], r["lhs"], r["rhs"], r["z"]) for r in rows])
    _write(cfg, outputs, "laws", report)
    return outputs, 0 if passed else 2


COMMANDS = {
    "kato": cmd_kato,
    "ls": cmd_ls,
    "energy": cmd_energy,
    "decay": cmd_decay,
    "laws": cmd_laws,
}


def run_command(op, cfg):
    """
    Run one operation under the run lock, append its ledger entry and map
    failures to the exit-code contract.
    """
    if not run_lock.acquire(blocking=False):
        logging.info("Run already in progress; waiting.")
        run_lock.acquire()
    start = time.time()
    try:
        logging.info("Starting %s", generate_label({"type": "run", "op": op, "experiment": cfg.experiment,
                                                    "seed": cfg.seed}))
        outputs, code = COMMANDS[op](cfg)
        ledger.append_entry(cfg.out, {
            "op": op,
            "experiment": cfg.experiment,
            "config_path": cfg.path,
            "config_text": cfg.text,
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "workers": cfg.workers,
            "outputs": outputs,
            "exit_code": code,
            "timing": round(time.time() - start, 3),
        })
        logging.info("%s finished with exit code %d.", op, code)
        return code
    except SimulationError as e:
        logging.error("Error during %s: %s", op, e)
        return e.exit_code
    except ValueError as e:
        logging.error("Invalid input for %s: %s", op, e)
        return 1
    finally:
        run_lock.release()


def cmd_replay(out_dir, index=-1, workers=None):
    """
    Re-run a ledger entry from its stored config text and seed into
    <out_dir>/replay and compare output digests.
    """
    entries = [e for e in ledger.read_entries(out_dir) if e.get("op") in COMMANDS]
    if not entries:
        logging.error("No ledger entries in %s", out_dir)
        return 1
    try:
        entry = entries[index]
    except IndexError:
        logging.error("Ledger in %s has no entry %d", out_dir, index)
        return 1
    try:
        cfg = parse_config(entry["config_text"], entry["config_path"])
    except SimulationError as e:
        logging.error("Stored config no longer parses: %s", e)
        return e.exit_code
    target = Path(out_dir) / "replay"
    cfg = cfg.with_overrides(seed=entry["seed"], workers=workers or entry["workers"], out=target)
    code = run_command(entry["op"], cfg)
    replayed = [e for e in ledger.read_entries(target) if e.get("op") == entry["op"]]
    if code != entry["exit_code"] or not replayed or replayed[-1]["outputs"] != entry["outputs"]:
        logging.error("Replay of %s differs from the recorded run.", entry["op"])
        return 1
    logging.info("Replay of %s reproduced %d outputs.", entry["op"], len(entry["outputs"]))
    return 0
