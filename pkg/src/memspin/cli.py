"""Config-driven scenario runner.

Usage::

    memspin run|validate|fock-verify|extract-transfer <config> [--out DIR]
            [--jobs N] [--grid-scale F]

``<config>`` is a JSON file (human units: MHz and us) or the name of a
bundled scenario.  Outputs land in ``--out`` (default: $MEMSPIN_OUT or
./memspin_out): ``report.json`` always, plus ``heatmap_field.csv`` /
``heatmap_spin.csv`` and ``transfer.csv`` when requested.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from importlib import resources

import numpy as np

from . import analytic, compiler, core, fock, pde
from .core import MemspinError, ValidationError, angular_from_mhz

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValidationError):
    """Configuration file failed validation; message names the bad path."""


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def scenario_path(name: str):
    """Path of a bundled scenario (with or without the .json suffix)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    return resources.files("memspin") / "scenarios" / fname


def bundled_scenarios() -> list[str]:
    base = resources.files("memspin") / "scenarios"
    return sorted(p.name[:-5] for p in base.iterdir() if p.name.endswith(".json"))


def load_config(path_or_name: str) -> dict:
    candidate = scenario_path(path_or_name)
    if os.path.exists(path_or_name):
        text = open(path_or_name, "r", encoding="utf-8").read()
    elif candidate.is_file():
        text = candidate.read_text(encoding="utf-8")
    else:
        raise ConfigError(f"config '{path_or_name}' not found (not a file or bundled name)")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    return cfg


def _get(cfg: dict, path: str, typ, required=True, default=None):
    node = cfg
    parts = path.split(".")
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"missing config entry '{'.'.join(parts[:i + 1])}'")
            return default
        node = node[part]
    if typ is float and isinstance(node, int):
        node = float(node)
    if not isinstance(node, typ):
        name = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise ConfigError(f"config entry '{path}' must be {name}")
    return node


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_spectrum(cfg: dict) -> core.ModeSpectrum:
    sc = _get(cfg, "spectrum", dict)
    guard = float(sc.get("guard", core.FAR_DETUNED_GUARD))
    if "detunings_mhz" in sc:
        det = np.asarray(sc["detunings_mhz"], dtype=float)
        mean = float(sc.get("mean_mhz", det.mean()))
        return core.ModeSpectrum(mean_detuning=angular_from_mhz(mean),
                                 detunings=angular_from_mhz(det), guard=guard)
    mean = _get(cfg, "spectrum.mean_mhz", float)
    n = _get(cfg, "spectrum.n_modes", int)
    if n == 1:
        return core.ModeSpectrum(mean_detuning=angular_from_mhz(mean),
                                 detunings=angular_from_mhz(np.array([mean])), guard=guard)
    spacing = _get(cfg, "spectrum.spacing_mhz", float)
    return core.ModeSpectrum.equally_spaced(mean, spacing, n, guard=guard)


def build_atoms(cfg: dict) -> core.AtomicParams:
    return core.AtomicParams(
        Gamma=angular_from_mhz(_get(cfg, "atoms.Gamma_mhz", float)),
        gamma=angular_from_mhz(_get(cfg, "atoms.gamma_mhz", float, required=False,
                                    default=0.0)),
        delta=angular_from_mhz(_get(cfg, "atoms.delta_mhz", float, required=False,
                                    default=0.0)),
        beta=_get(cfg, "atoms.optical_depth", float),
    )


def build_unitary(spec: dict, n: int, label: str) -> compiler.UnitarySpec:
    kind = spec.get("kind", "explicit")
    if kind == "identity":
        return compiler.UnitarySpec(np.eye(n), label=label)
    if kind == "dft":
        return compiler.dft_unitary(n, label=label)
    if kind == "hadamard2":
        if n != 2:
            raise ConfigError(f"unitaries.{label}: hadamard2 needs exactly 2 modes")
        return compiler.UnitarySpec(np.array([[1, 1], [1, -1]]) / math.sqrt(2), label=label)
    if kind == "haar":
        if "seed" not in spec:
            raise ConfigError(f"unitaries.{label}: haar requires a seed")
        return compiler.haar_random_unitary(n, seed=int(spec["seed"]), label=label)
    if kind == "explicit":
        if "re" not in spec or "im" not in spec:
            raise ConfigError(f"unitaries.{label}: explicit matrix needs re and im")
        m = np.asarray(spec["re"], dtype=float) + 1j * np.asarray(spec["im"], dtype=float)
        return compiler.UnitarySpec(m, label=label)
    raise ConfigError(f"unitaries.{label}: unknown kind '{kind}'")


def build_grid(cfg: dict, grid_scale: float = 1.0) -> pde.Grid:
    nz = _get(cfg, "grid.nz", int)
    dt = _get(cfg, "grid.dt_us", float)
    window = _get(cfg, "grid.window_us", float)
    if grid_scale != 1.0:
        nz = int(round(nz * grid_scale))
        dt = dt / grid_scale
    return pde.Grid(nz=nz, dt=dt, window=window)


def build_pulse(cfg: dict, n: int) -> pde.GaussianPulse:
    shape = _get(cfg, "pulse.shape", str, required=False, default="gaussian")
    if shape != "gaussian":
        raise ConfigError(f"pulse.shape '{shape}' unsupported (gaussian only)")
    fwhm = _get(cfg, "pulse.fwhm_us", float)
    center = _get(cfg, "pulse.center_us", float)
    amps_cfg = _get(cfg, "pulse.mode_amplitudes", (str, dict), required=False,
                    default="uniform")
    if amps_cfg == "uniform":
        amps = np.ones(n, dtype=complex) / math.sqrt(n)
    elif isinstance(amps_cfg, dict):
        amps = np.asarray(amps_cfg["re"], dtype=float) + 1j * np.asarray(
            amps_cfg.get("im", np.zeros(len(amps_cfg["re"]))), dtype=float)
        if amps.size != n:
            raise ConfigError("pulse.mode_amplitudes length must equal the mode count")
    else:
        raise ConfigError("pulse.mode_amplitudes must be 'uniform' or {re, im}")
    return pde.GaussianPulse(fwhm=fwhm, center=center, mode_amplitudes=amps)


def build_options(cfg: dict, heatmap: bool) -> pde.SimOptions:
    oc = cfg.get("options", {})
    return pde.SimOptions(
        power_broadening=bool(oc.get("power_broadening", True)),
        compensate_dispersion=bool(oc.get("compensate_dispersion", True)),
        auto_two_photon=bool(oc.get("auto_two_photon", True)),
        margin_threshold=float(cfg.get("margin_threshold", core.MARGIN_THRESHOLD)),
        record_heatmap=heatmap,
    )


class NetworkSetup:
    """Everything needed to run a compiled two-operation scenario."""

    def __init__(self, cfg: dict, grid_scale: float = 1.0, heatmap: bool = False):
        self.spectrum = build_spectrum(cfg)
        n = self.spectrum.n_modes
        self.atoms = build_atoms(cfg)
        n_cells = _get(cfg, "cells.count", int, required=False, default=n)
        if n_cells != n:
            raise ConfigError("cells.count must equal the mode count for compiled plans")
        gradient = angular_from_mhz(_get(cfg, "cells.gradient_mhz", float))
        self.cells = [pde.MemoryCell(atoms=self.atoms, gradient_eta=gradient, id=f"m{j}")
                      for j in range(n)]
        ot = _get(cfg, "coupling.omega_tilde", float)
        self.u_in = build_unitary(_get(cfg, "unitaries.write", dict), n, "write")
        self.u_out = build_unitary(_get(cfg, "unitaries.read", dict), n, "read")
        self.write_plan = compiler.compile_write(self.u_in, self.spectrum, ot)
        self.read_plan = compiler.compile_read(self.u_out, self.spectrum, ot)
        self.schedule = pde.store_recall_schedule(self.write_plan, self.read_plan)
        self.grid = build_grid(cfg, grid_scale)
        self.pulse = build_pulse(cfg, n)
        self.options = build_options(cfg, heatmap)

    def margin_report(self) -> core.MarginReport:
        reps = [compiler.validate_plan(plan, self.spectrum, self.atoms,
                                       threshold=self.options.margin_threshold)
                for plan in (self.write_plan, self.read_plan)]
        return core.MarginReport(
            margin7=min(r.margin7 for r in reps),
            margin9=min(r.margin9 for r in reps),
            threshold=self.options.margin_threshold)


# ---------------------------------------------------------------------------
# Report helpers
# ---------------------------------------------------------------------------

def _margin_dict(rep: core.MarginReport) -> dict:
    def enc(x):
        return None if math.isinf(x) else x
    return {"margin7": enc(rep.margin7), "margin9": enc(rep.margin9),
            "pass7": rep.pass7, "pass9": rep.pass9, "threshold": rep.threshold}


def _complex_matrix_dict(m: np.ndarray) -> dict:
    return {"re": np.real(m).tolist(), "im": np.imag(m).tolist()}


def write_report(out_dir: str, report: dict) -> str:
    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def write_transfer_csv(out_dir: str, matrix: np.ndarray) -> str:
    path = os.path.join(out_dir, "transfer.csv")
    n = matrix.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("out_mode," + ",".join(f"in_{j}" for j in range(n)) + "\n")
        for k in range(n):
            cells = ",".join(f"{matrix[k, j].real:+.12e}{matrix[k, j].imag:+.12e}j"
                             for j in range(n))
            fh.write(f"{k},{cells}\n")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_validate(cfg: dict, out_dir: str, args) -> int:
    kind = cfg.get("type", "network")
    if kind == "fock":
        # UnitarySpec construction inside the builder validates every stage.
        stages, _ = build_fock_network(cfg)
        print(f"fock scenario '{cfg.get('label', '?')}': {len(stages)} stages, all unitary")
        return EXIT_OK
    if kind == "eq5_sweep":
        _, cases = build_eq5_cases(cfg)
        print(f"eq5 sweep '{cfg.get('label', '?')}': {len(cases)} cases validate")
        return EXIT_OK
    setup = NetworkSetup(cfg)
    rep = setup.margin_report()
    md = _margin_dict(rep)
    print(json.dumps({"label": cfg.get("label", ""), "margins": md}, indent=1,
                     sort_keys=True))
    status = "pass" if (rep.pass7 and rep.pass9) else "FAIL"
    print(f"validity margins: margin7={rep.margin7:.4g} margin9={rep.margin9:.4g} "
          f"threshold={rep.threshold:g} -> {status}")
    return EXIT_OK


def cmd_run(cfg: dict, out_dir: str, args) -> int:
    kind = cfg.get("type", "network")
    if kind == "eq5_sweep":
        return _run_eq5(cfg, out_dir, args)
    if kind == "fock":
        return cmd_fock_verify(cfg, out_dir, args)
    t0 = time.time()
    heatmap = bool(cfg.get("outputs", {}).get("heatmap", False))
    setup = NetworkSetup(cfg, grid_scale=args.grid_scale, heatmap=heatmap)
    margins = setup.margin_report()

    psi = pde.default_temporal_mode(setup.cells, setup.schedule, setup.grid,
                                    setup.spectrum, setup.pulse, setup.options)
    e_single = pde.GaussianPulse(fwhm=setup.pulse.fwhm, center=setup.pulse.center,
                                 mode_amplitudes=np.array([1.0])).energy()
    ideal_m = compiler.ideal_transfer(setup.u_in, setup.u_out).matrix
    ideal = pde.ideal_output(ideal_m, setup.pulse.mode_amplitudes, psi, e_single)

    result = pde.simulate_network(setup.cells, setup.schedule, {0: setup.pulse},
                                  setup.grid, setup.spectrum, setup.options, ideal=ideal)

    transfer = None
    if bool(cfg.get("outputs", {}).get("transfer", False)):
        transfer = pde.extract_transfer_matrix(
            setup.cells, setup.schedule, setup.grid, setup.spectrum, setup.pulse,
            setup.options, temporal_mode=psi, jobs=args.jobs)

    os.makedirs(out_dir, exist_ok=True)
    report = {
        "label": cfg.get("label", ""),
        "config_hash": config_hash(cfg),
        "efficiency": result.efficiency,
        "overlap": result.overlap,
        "margins": _margin_dict(margins),
        "window_energies": result.window_energies,
        "output_windows": list(result.output_windows),
        "grid": {"nz": setup.grid.nz, "dt_us": setup.grid.dt,
                 "window_us": setup.grid.window},
        "transfer": _complex_matrix_dict(transfer) if transfer is not None else None,
        "wall_time_s": time.time() - t0,
    }
    path = write_report(out_dir, report)
    if transfer is not None:
        write_transfer_csv(out_dir, transfer)
    if heatmap and result.heatmap_field is not None:
        pde.write_heatmap_csv(os.path.join(out_dir, "heatmap_field.csv"),
                              result.heatmap_field, result.heatmap_times,
                              result.heatmap_z, setup.grid, len(setup.cells))
        pde.write_heatmap_csv(os.path.join(out_dir, "heatmap_spin.csv"),
                              result.heatmap_spin, result.heatmap_times,
                              result.heatmap_z, setup.grid, len(setup.cells))
    print(f"{cfg.get('label', 'scenario')}: efficiency={result.efficiency:.4f} "
          f"overlap={result.overlap:.4f} -> {path}")
    return EXIT_OK


def build_eq5_cases(cfg: dict):
    base = {
        "atoms": _get(cfg, "atoms", dict),
        "coupling": _get(cfg, "coupling", dict),
        "pulse": _get(cfg, "pulse", dict),
        "grid": _get(cfg, "grid", dict),
    }
    cases = _get(cfg, "cases", list)
    for i, case in enumerate(cases):
        if "label" not in case or "spacing_mhz" not in case:
            raise ConfigError(f"cases[{i}] needs label and spacing_mhz")
    return base, cases


def _run_eq5(cfg: dict, out_dir: str, args) -> int:
    t0 = time.time()
    _, cases = build_eq5_cases(cfg)
    atoms = build_atoms(cfg)
    ot = _get(cfg, "coupling.omega_tilde", float)
    gradient = angular_from_mhz(_get(cfg, "cells.gradient_mhz", float))
    mean = _get(cfg, "spectrum.mean_mhz", float)
    results = []
    for case in cases:
        sp = core.ModeSpectrum.equally_spaced(mean, float(case["spacing_mhz"]), 2)
        dt = float(case.get("dt_us", _get(cfg, "grid.dt_us", float)))
        grid = build_grid({"grid": {"nz": _get(cfg, "grid.nz", int), "dt_us": dt,
                                    "window_us": _get(cfg, "grid.window_us", float)}},
                          args.grid_scale)
        cell = pde.MemoryCell(atoms=atoms, gradient_eta=gradient, id="eq5")
        cv = core.CouplingVector(ot * sp.detunings / math.sqrt(2))
        rates = core.effective_rates(cv, sp, atoms)
        m9 = core.check_inequality_9(sp, rates)
        pulse = build_pulse(cfg, 2)
        opts = build_options(cfg, heatmap=False)
        entries = [pde.ScheduleEntry("store", cv, 1), pde.ScheduleEntry("recall", cv, -1)]
        sched = pde.Schedule(entries=((entries[0], entries[1]),))
        res = pde.simulate_network([cell], sched, {0: pulse}, grid, sp, opts)
        eff_multi = res.efficiency
        outs, _ = pde.simulate_eq5(cell, entries, pulse, grid, sp, opts)
        beats = sp.detunings - sp.mean_detuning
        tt = grid.times
        comp_in = np.sum(pulse.mode_amplitudes[:, None] * pulse.envelope(tt)[None, :]
                         * np.exp(1j * np.outer(beats, tt)), axis=0)
        e_in = float(np.trapezoid(np.abs(comp_in) ** 2, tt))
        eff_single = outs[1].energy() / e_in
        dev = abs(eff_single - eff_multi) / eff_multi
        results.append({
            "label": case["label"],
            "spacing_mhz": float(case["spacing_mhz"]),
            "margin9": m9 if not math.isinf(m9) else None,
            "efficiency_multi_transition": eff_multi,
            "efficiency_single_excited": eff_single,
            "relative_deviation": dev,
        })
        print(f"{case['label']}: margin9={m9:.3g} eff_multi={eff_multi:.4f} "
              f"eff_single={eff_single:.4f} rel_dev={dev:.4f}")
    os.makedirs(out_dir, exist_ok=True)
    report = {
        "label": cfg.get("label", ""),
        "config_hash": config_hash(cfg),
        "cases": results,
        "wall_time_s": time.time() - t0,
    }
    write_report(out_dir, report)
    return EXIT_OK


def build_fock_network(cfg: dict):
    fc = _get(cfg, "fock", dict)
    cap = int(fc.get("photon_cap", fock.DEFAULT_PHOTON_CAP))
    assembly = fc.get("assembly", "cz")
    if assembly != "cz":
        raise ConfigError(f"fock.assembly '{assembly}' unknown (only 'cz' bundled)")
    stages = fock.cz_network()
    roles = fc.get("stages")
    if roles is not None:
        if len(roles) != len(stages):
            raise ConfigError("fock.stages must list one entry per assembly stage")
        rebuilt = []
        for i, (entry, stage) in enumerate(zip(roles, stages)):
            if entry.get("role") != stage.role:
                raise ConfigError(
                    f"fock.stages[{i}].role '{entry.get('role')}' does not match "
                    f"assembly role '{stage.role}'")
            if "re" in entry or "im" in entry:
                # explicit override of one stage's unitary (validated here)
                m = np.asarray(entry["re"], dtype=float) \
                    + 1j * np.asarray(entry.get("im", np.zeros_like(entry["re"])),
                                      dtype=float)
                stage = fock.GateStage(
                    unitary=compiler.UnitarySpec(m, label=stage.label.lower()),
                    modes=stage.modes, label=stage.label, role=stage.role)
            rebuilt.append(stage)
        stages = rebuilt
    herald = tuple(fc.get("herald", fock.CZ_HERALD_PATTERN))
    policy = fock.FeedforwardPolicy(
        measure_modes=tuple(fc.get("ancilla_modes", fock.CZ_ANCILLA_MODES)),
        branches={herald: (tuple(stages[2:]), True)},
        default=((), False),
    )
    return stages, (policy, cap, fc)


def _parse_qubit_label(label: str):
    table = {
        "0": (1.0, 0.0), "1": (0.0, 1.0),
        "+": (1.0 / math.sqrt(2), 1.0 / math.sqrt(2)),
        "-": (1.0 / math.sqrt(2), -1.0 / math.sqrt(2)),
    }
    if len(label) != 2 or label[0] not in table or label[1] not in table:
        raise ConfigError(f"fock input label '{label}' not recognised")
    return table[label[0]], table[label[1]]


def cmd_fock_verify(cfg: dict, out_dir: str, args) -> int:
    t0 = time.time()
    stages, (policy, cap, fc) = build_fock_network(cfg)
    labels = fc.get("inputs", ["00", "01", "10", "11", "++"])
    rows = []
    for label in labels:
        q1, q2 = _parse_qubit_label(label)
        state = fock.dual_rail_input(q1, q2, photon_cap=cap)
        outcomes = fock.run_with_feedforward(stages, state, policy)
        succ = [o for o in outcomes if o.success]
        if len(succ) != 1:
            raise fock.ConditioningError(f"input {label}: expected one success branch")
        ideal = fock.dual_rail_cz_ideal(q1, q2, photon_cap=cap)
        fidelity = succ[0].conditioned_state.normalized().fidelity(ideal)
        fail_p = sum(o.probability for o in outcomes if not o.success)
        rows.append({
            "input": label,
            "success_probability": succ[0].probability,
            "fidelity": fidelity,
            "failure_probability": fail_p,
        })
        print(f"|{label}>: P_success={succ[0].probability:.6f} fidelity={fidelity:.12f}")
    os.makedirs(out_dir, exist_ok=True)
    report = {
        "label": cfg.get("label", ""),
        "config_hash": config_hash(cfg),
        "gates": rows,
        "stage_labels": [s.label for s in stages],
        "wall_time_s": time.time() - t0,
    }
    if "export_plans" in fc:
        ep = fc["export_plans"]
        sp = core.ModeSpectrum.equally_spaced(
            float(ep["mean_mhz"]), float(ep["spacing_mhz"]), fock.CZ_MODES,
            guard=float(ep.get("guard", core.FAR_DETUNED_GUARD)))
        report["stage_plans"] = fock.stage_plans(stages, sp, float(ep["omega_tilde"]))
    write_report(out_dir, report)
    return EXIT_OK


def cmd_extract_transfer(cfg: dict, out_dir: str, args) -> int:
    t0 = time.time()
    setup = NetworkSetup(cfg, grid_scale=args.grid_scale)
    matrix = pde.extract_transfer_matrix(
        setup.cells, setup.schedule, setup.grid, setup.spectrum, setup.pulse,
        setup.options, jobs=args.jobs)
    os.makedirs(out_dir, exist_ok=True)
    report = {
        "label": cfg.get("label", ""),
        "config_hash": config_hash(cfg),
        "transfer": _complex_matrix_dict(matrix),
        "wall_time_s": time.time() - t0,
    }
    write_report(out_dir, report)
    path = write_transfer_csv(out_dir, matrix)
    print(f"transfer matrix ({matrix.shape[0]} modes) -> {path}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "validate": cmd_validate,
    "fock-verify": cmd_fock_verify,
    "extract-transfer": cmd_extract_transfer,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="memspin",
        description="Compile and simulate memory-based linear optical networks.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="config JSON path or bundled scenario name")
    parser.add_argument("--out", default=None, help="output directory "
                        "(default: $MEMSPIN_OUT or ./memspin_out)")
    parser.add_argument("--jobs", type=int, default=1, help="parallel basis probes")
    parser.add_argument("--grid-scale", type=float, default=1.0, dest="grid_scale",
                        help="refine (>1) or coarsen (<1) the grid")
    args = parser.parse_args(argv)
    out_dir = args.out or os.environ.get("MEMSPIN_OUT", "memspin_out")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, out_dir, args)
    except (ConfigError, ValidationError, compiler.ValidationError,
            pde.ScheduleError, fock.PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pde.StepSizeError, pde.DivergenceError, analytic.StepSizeError,
            fock.ConditioningError, fock.DerivationError,
            pde.UndefinedOverlapError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MemspinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
