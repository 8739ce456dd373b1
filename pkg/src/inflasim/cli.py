"""Command-line runner: config validation, the staged pipeline and its reports.

Every subcommand reads one JSON run config. Outputs are JSON reports, CSV
tables, state snapshots and PNG figures, listed with their sha256 in
manifest.json.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .background import CosmologyParams, eft_hierarchy_ok, efolds
from .encoding import FieldGridSpec, budget_grid, encoding_complexity, hkll_kernel, kernel_matrices
from .errors import ConfigError, InflasimError, InvariantError, NumericalError
from .evolution import (TrotterPlan, adiabatic_prepare, alpha_com, alpha_com_bound,
                        commutator_terms, gate_budgets, inflation_coefficients, interacting_ground_state,
                        lattice_error_budget, lowest_modes, trotter_evolve)
from .hamiltonian import (DEFAULT_H3_SUBSTEPS, TERMS, HamiltonianFamily, coefficient_table_csv, coefficients,
                          norm_bounds)
from .hilbert import (MAX_AMPLITUDES, MAX_DENSE_DIM, StateVector, check_dimension, diagonal_mode_ladder,
                      load_snapshot, save_snapshot)
from .lattice_modes import (VACUA, LatticeSpec, ModeTable, bogoliubov, dispersion_expansion, free_gap,
                            lattice_omegas, wightman_matrix)
from .observables import (DEFAULT_DAMPING, CorrelatorResult, bispectrum, continuum_power_spectrum,
                          correlator_csv, expect_fields, inin_lattice, inin_tree, kernel_two_point, plateau,
                          power_spectrum, sample_estimate, three_point_table, two_point_table)
from .stateprep import build_covariance, evolution_grid, field_covariance, synthesize_gaussian, vacuum_grid

log = logging.getLogger("inflasim")

ENV_PREFIX = "INFLASIM_"
GRID_MODES = ("evolution", "vacuum", "explicit", "auto")
OBSERVABLE_KINDS = ("two_point_table", "three_point_table", "power_spectrum", "correlator", "bispectrum")
# closed-form gate counts above this are reported as out of desk reach
GATE_WARNING = 1e15

PROFILES = {
    "default": {"two_point_rtol": 1e-2, "three_point_rtol": 5e-2, "covariance_rtol": 1e-2, "energy_rtol": 2e-2,
                "adiabatic_infidelity": 1e-2, "kernel_rtol": 1e-8, "bogoliubov_atol": 1e-12, "norm_atol": 1e-8},
    "strict": {"two_point_rtol": 1e-3, "three_point_rtol": 1e-2, "covariance_rtol": 1e-3, "energy_rtol": 1e-2,
               "adiabatic_infidelity": 1e-3, "kernel_rtol": 1e-10, "bogoliubov_atol": 1e-12, "norm_atol": 1e-9},
}

DEFAULTS = {
    "cosmology": {"H": 0.05, "epsilon": 0.01, "c_s": 1.0, "lambda_c": 0.0, "Sigma": None,
                  "tau0": -10.0, "tau_end": -1.0, "Sigma_derived": None},
    "lattice": {"b": 10.0, "L_hat": 2, "d": 1},
    "grid": {"mode": "evolution", "n_b": 5, "zeta_max": None, "eps_jlp": 1e-3, "frozen_zero_mode": True,
             "cell": None, "G": None, "delta_zeta": None, "delta_pi": None},
    "prepare": {"vacuum": "bunch_davies"},
    "trotter": {"order": 2, "steps": 100, "evaluation_rule": None, "splitting": list(TERMS),
                "h3_substeps": DEFAULT_H3_SUBSTEPS, "trace_every": None, "trace_modes": None},
    "adiabatic": {"enabled": False, "T": 40.0, "steps": 320, "order": 2, "project_until": 0.1,
                  "project_modes": None, "compare_ground_state": True, "trace_every": None},
    "observables": None,
    "oracles": {"two_point": True, "inin_lattice": False, "inin_rtol": 1e-10, "inin_damping": DEFAULT_DAMPING,
                "inin_ks": None, "dense_levels": 6},
    "budget": {"coupling": 1.0, "kappa": 1.0, "k_norm": None, "alpha_exact_max_dim": 256},
    "limits": {"max_amplitudes": MAX_AMPLITUDES, "max_dense_dim": MAX_DENSE_DIM},
    "tolerances": {key: None for key in PROFILES["default"]},
    "figures": True,
    "seed": 0,
    "output_dir": "inflasim_out",
    # filled in on resolution; accepted on input so a resolved config can be rerun
    "tolerance_profile": None,
    "workers": None,
    "version": None,
}

OBSERVABLE_DEFAULTS = {"kind": None, "sites": None, "estimator": "exact", "shots": 0, "k": None}
DEFAULT_OBSERVABLES = [{"kind": "two_point_table"}, {"kind": "power_spectrum"}]


# -- config ---------------------------------------------------------------------------

def _check_leaf(value, default, where):
    if default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def _merge(defaults: dict, given, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{where}: expected an object, got {given!r}")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    out = {}
    for key, dv in defaults.items():
        path = f"{where}.{key}" if where else key
        if key not in given:
            out[key] = copy.deepcopy(dv)
        elif isinstance(dv, dict) and not (key == "grid" and given[key] == "auto"):
            out[key] = _merge(dv, given[key], path)
        else:
            out[key] = _check_leaf(given[key], dv, path)
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return raw


def validate_config(raw: dict) -> dict:
    """Merge a raw config over the defaults, rejecting unknown keys and bad types."""
    cfg = _merge(DEFAULTS, raw, "")
    if cfg["grid"] == "auto":
        cfg["grid"] = dict(DEFAULTS["grid"], mode="auto")
    obs = DEFAULT_OBSERVABLES if cfg["observables"] is None else cfg["observables"]
    if not isinstance(obs, list):
        raise ConfigError("observables: expected a list")
    cfg["observables"] = [_merge(OBSERVABLE_DEFAULTS, o, f"observables[{i}]") for i, o in enumerate(obs)]
    for i, o in enumerate(cfg["observables"]):
        if o["kind"] not in OBSERVABLE_KINDS:
            raise ConfigError(f"observables[{i}].kind must be one of {OBSERVABLE_KINDS}")
        if o["estimator"] not in ("exact", "sampled"):
            raise ConfigError(f"observables[{i}].estimator must be exact or sampled")
        if o["kind"] == "correlator" and not o["sites"]:
            raise ConfigError(f"observables[{i}]: a correlator needs sites")
        if o["kind"] == "bispectrum" and (not isinstance(o["k"], list) or len(o["k"]) != 3):
            raise ConfigError(f"observables[{i}]: a bispectrum needs three momentum indices in k")
        if o["estimator"] == "sampled" and o["shots"] < 1:
            raise ConfigError(f"observables[{i}]: sampled estimates need shots >= 1")
    if cfg["grid"]["mode"] not in GRID_MODES:
        raise ConfigError(f"grid.mode must be one of {GRID_MODES}")
    if cfg["grid"]["mode"] == "explicit" and cfg["grid"]["zeta_max"] is None:
        raise ConfigError("grid.mode explicit needs grid.zeta_max")
    if cfg["prepare"]["vacuum"] not in VACUA:
        raise ConfigError(f"prepare.vacuum must be one of {VACUA}")
    for key in ("max_amplitudes", "max_dense_dim"):
        cap = DEFAULTS["limits"][key]
        if not 1 <= cfg["limits"][key] <= cap:
            raise ConfigError(f"limits.{key} must lie in [1, {cap}]")
    if cfg["cosmology"]["tau_end"] == 0:
        raise ConfigError("cosmology.tau_end must be strictly negative")
    return cfg


def _resolve_grid(cfg, params, lattice) -> FieldGridSpec:
    g = cfg["grid"]
    cell = lattice.b**lattice.d
    vac = cfg["prepare"]["vacuum"]
    if g["mode"] == "evolution":
        return evolution_grid(params, lattice, g["n_b"], vac, g["eps_jlp"])
    if g["mode"] == "vacuum":
        return vacuum_grid(params, lattice, g["n_b"], params.tau0, vac, g["eps_jlp"])
    if g["mode"] == "explicit":
        return FieldGridSpec(float(g["zeta_max"]), g["n_b"], cell, g["eps_jlp"])
    bud = budget_grid(params, lattice, g["eps_jlp"])
    return FieldGridSpec(bud["zeta_max"], bud["n_b"], cell, g["eps_jlp"])


def resolve_config(raw: dict, out=None, seed=None, workers=None, profile=None) -> dict:
    """Validated config with every default made explicit and overrides applied."""
    cfg = validate_config(raw)
    if out is not None:
        cfg["output_dir"] = str(out)
    if seed is not None:
        cfg["seed"] = int(seed)
    profile = profile or cfg["tolerance_profile"] or "default"
    if profile not in PROFILES:
        raise ConfigError(f"unknown tolerance profile {profile!r}")
    cfg["tolerance_profile"] = profile
    cfg["workers"] = max(1, int(workers or cfg["workers"] or 1))
    for key, v in cfg["tolerances"].items():
        if v is None:
            cfg["tolerances"][key] = PROFILES[profile][key]
    cos = dict(cfg["cosmology"])
    if cos.pop("Sigma_derived"):
        cos["Sigma"] = None
    params = CosmologyParams(**cos)
    cfg["cosmology"] = params.to_dict()
    lattice = LatticeSpec(cfg["lattice"]["b"], cfg["lattice"]["L_hat"], cfg["lattice"]["d"])
    grid = _resolve_grid(cfg, params, lattice)
    cfg["grid"].update(n_b=grid.n_b, zeta_max=grid.zeta_max, cell=grid.cell, G=grid.G,
                       delta_zeta=grid.delta_zeta, delta_pi=grid.delta_pi)
    plan = TrotterPlan(cfg["trotter"]["order"], cfg["trotter"]["steps"], params.tau0, params.tau_end,
                       cfg["trotter"]["evaluation_rule"], tuple(cfg["trotter"]["splitting"]),
                       cfg["trotter"]["h3_substeps"])
    cfg["trotter"]["evaluation_rule"] = plan.evaluation_rule
    low = lowest_modes(lattice)
    if cfg["trotter"]["trace_every"] is None:
        cfg["trotter"]["trace_every"] = max(1, plan.steps // 20)
    if cfg["trotter"]["trace_modes"] is None:
        cfg["trotter"]["trace_modes"] = low[:1]
    ad = cfg["adiabatic"]
    TrotterPlan(ad["order"], ad["steps"], 0.0, ad["T"])
    if ad["project_modes"] is None:
        ad["project_modes"] = low
    if ad["trace_every"] is None:
        ad["trace_every"] = max(1, ad["steps"] // 20)
    if cfg["budget"]["k_norm"] is None:
        cfg["budget"]["k_norm"] = 2 * math.pi / lattice.length
    if cfg["oracles"]["inin_ks"] is None:
        k = 2 * math.pi / lattice.length
        cfg["oracles"]["inin_ks"] = [k, k, k]
    cfg["version"] = __version__
    return cfg


# -- outputs ----------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, complex):
        return [x.real, x.imag]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _table_csv(header, rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer))
                                                                else repr(float(v))) for v in r))
    return "\n".join(lines) + "\n"


class StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return getattr(self.cause, "exit_code", 5)


@dataclass
class RunReport:
    status: str = "ok"
    stages: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    failure: dict | None = None

    def failed_checks(self) -> list:
        return sorted(k for k, v in self.checks.items() if not v["passed"])


class Pipeline:
    """One run: resolved config in, files and a RunReport out."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.params = CosmologyParams(**{k: v for k, v in cfg["cosmology"].items() if k != "Sigma_derived"})
        lat = cfg["lattice"]
        self.lattice = LatticeSpec(lat["b"], lat["L_hat"], lat["d"])
        g = cfg["grid"]
        self.grid = FieldGridSpec(g["zeta_max"], g["n_b"], g["cell"], g["eps_jlp"])
        self.frozen = g["frozen_zero_mode"]
        self.tol = cfg["tolerances"]
        self.report = RunReport()
        self.files: dict[str, str] = {}
        self.state: StateVector | None = None
        self.fam: HamiltonianFamily | None = None
        self.traces: dict[str, list] = {}
        self._tables: dict[str, np.ndarray] = {}

    # -- plumbing
    def write(self, name: str, data) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            path.write_text(data)
        else:
            path.write_bytes(data)
        self.files[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def _register(self, name: str):
        self.files[name] = hashlib.sha256((self.out / name).read_bytes()).hexdigest()

    def stage(self, name, fn, *args):
        try:
            result = fn(*args)
        except InflasimError as exc:
            self.report.stages.append({"name": name, "status": "failed"})
            raise StageFailure(name, exc) from exc
        except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
            self.report.stages.append({"name": name, "status": "failed"})
            raise StageFailure(name, NumericalError(str(exc))) from exc
        self.report.stages.append({"name": name, "status": "ok"})
        return result

    def check(self, name, value, tolerance, passed=None):
        ok = bool(value <= tolerance) if passed is None else bool(passed)
        self.report.checks[name] = {"value": value, "tolerance": tolerance, "passed": ok}

    def warn(self, msg):
        self.report.warnings.append(msg)
        log.warning(msg)

    @property
    def interacting(self) -> bool:
        c = coefficients(self.params, 1.0, self.params.tau0, 1.0)
        return c.cubic != 0.0 or c.mixed != 0.0

    def basis_dim(self) -> int:
        V = self.lattice.volume
        return self.grid.G ** (V - 1 if self.frozen else V)

    def family(self) -> HamiltonianFamily:
        if self.fam is None:
            check_dimension(self.basis_dim(), self.cfg["limits"]["max_amplitudes"], "state")
            self.fam = HamiltonianFamily.build(self.params, self.lattice, self.grid, self.frozen)
        return self.fam

    # -- stages
    def modes(self, tau=None):
        tau = self.params.tau0 if tau is None else tau
        table = ModeTable(self.params, self.lattice)
        self.write("modes.csv", table.to_csv(tau))
        k = table.momenta
        rows = [list(kk) + [om, np.linalg.norm(kk), ex] for kk, om, ex in
                zip(k, table.omega, dispersion_expansion(self.lattice, k))]
        self.write("dispersion.csv", _table_csv([f"k{i}" for i in range(self.lattice.d)]
                                                + ["omega", "k_norm", "expansion"], rows))

    def budget(self):
        p, lat, cfg = self.params, self.lattice, self.cfg
        enc = budget_grid(p, lat, self.grid.eps_jlp)
        order = cfg["trotter"]["order"]
        k = max(1, order // 2)
        dim = self.basis_dim()
        bounds = norm_bounds(p, lat, self.grid, p.tau0)
        alpha, is_bound = alpha_com_bound(bounds, order), True
        if dim <= cfg["budget"]["alpha_exact_max_dim"]:
            fam = self.family()
            alpha, is_bound = alpha_com(commutator_terms(fam, fam.coefficients(p.tau0)), order), False
        gates = gate_budgets(p, lat.volume, self.grid.eps_jlp, k, cfg["adiabatic"]["T"], cfg["trotter"]["steps"],
                             coupling=cfg["budget"]["coupling"], alpha=alpha, alpha_is_bound=is_bound)
        tree, loop = lattice_error_budget(p, lat.b, cfg["budget"]["kappa"], cfg["budget"]["k_norm"])
        out = {
            "efolds": efolds(p),
            "eft_hierarchy_ok": eft_hierarchy_ok(p, lat.b),
            "encoding_closed_form": enc,
            "encoding_complexity_sites": encoding_complexity(p, lat),
            "grid": {"n_b": self.grid.n_b, "G": self.grid.G, "zeta_max": self.grid.zeta_max,
                     "qubits_total": self.grid.n_b * lat.volume, "amplitudes": dim},
            "norm_bounds_tau0": {"H1": bounds[0], "H2": bounds[1], "H3": bounds[2]},
            "gates": gates.to_dict(),
            "lattice_error": {"tree_scale": tree, "one_loop": loop},
        }
        if not out["eft_hierarchy_ok"]:
            self.warn("parameters violate the EFT hierarchy H < sqrt(H eps) <= 1/b << 1")
        if gates.n_inflation_total > GATE_WARNING:
            self.warn(f"closed-form n_inflation_total = {gates.n_inflation_total:.3e} is far beyond desk scale")
        self.report.results["budget"] = out
        self.write("budget.json", dumps(out))
        self.write("coefficients.csv", coefficient_table_csv(p, self.grid.cell, [p.tau0, p.tau_end]))
        return out

    def prepare(self):
        p, lat = self.params, self.lattice
        check_dimension(self.basis_dim(), self.cfg["limits"]["max_amplitudes"], "state")
        cov = build_covariance(p, lat, p.tau0, self.cfg["prepare"]["vacuum"])
        self.write("covariance.csv", cov.to_csv())
        state = synthesize_gaussian(cov, self.grid, lat, self.frozen)
        measured = field_covariance(state)
        rel = float(np.abs(measured - cov.M).max() / np.abs(cov.M).max())
        diag = {"leakage_bound": state.discarded, "covariance_rel_error": rel, "dimension": state.basis.dim}
        fam = self.family()
        c0 = fam.coefficients(p.tau0, 0.0)
        diag["free_energy"] = fam.energy(state.amplitudes, c0)
        if state.basis.dim <= self.cfg["limits"]["max_dense_dim"]:
            w, _ = interacting_ground_state(fam, p.tau0, 0.0)
            diag["free_ground_energy"] = float(w[0])
            diag["energy_rel_excess"] = float((diag["free_energy"] - w[0]) / abs(w[0]))
        self.report.results["prepare"] = diag
        self.write("prepare.json", dumps(diag))
        save_snapshot(state, self.out / "state_prepared.bin")
        self._register("state_prepared.bin")
        self._register("state_prepared.bin.json")
        self.state = state
        return state

    def adiabatic(self):
        ad, p = self.cfg["adiabatic"], self.params
        fam = self.family()
        target = None
        info = {}
        if ad["compare_ground_state"]:
            w, target = interacting_ground_state(fam, p.tau0, 1.0)
            info["ground_energy"] = float(w[0])
        res = adiabatic_prepare(self.state, fam, ad["T"], ad["steps"], ad["order"], ad["project_until"],
                                ad["project_modes"], target, ad["trace_every"])
        info.update(discarded=res.discarded, energy=res.energy, infidelity=res.infidelity, overlap=res.overlap)
        self.traces["adiabatic"] = res.trace
        self.write("adiabatic_trace.csv", res.trace_csv())
        self.write("adiabatic.json", dumps(info))
        self.report.results["adiabatic"] = info
        self.state = res.state
        return res

    def evolve(self):
        tr, p = self.cfg["trotter"], self.params
        fam = self.family()
        plan = TrotterPlan(tr["order"], tr["steps"], p.tau0, p.tau_end, tr["evaluation_rule"],
                           tuple(tr["splitting"]), tr["h3_substeps"])
        coeff_fn = inflation_coefficients(fam)
        ladders = [diagonal_mode_ladder(p, self.lattice, k, p.tau0) for k in tr["trace_modes"]]
        rows = []

        def record(step, tau, amps):
            st = self.state.with_amplitudes(amps)
            occ = []
            for lad in ladders:
                lad = diagonal_mode_ladder(p, self.lattice, lad.k_index, tau)
                occ.append(float(np.vdot(amps, lad.number(st).amplitudes).real))
            rows.append([step, tau, float(np.linalg.norm(amps)), fam.energy(amps, coeff_fn(tau))] + occ
                        + [self.state.discarded])

        record(0, p.tau0, self.state.amplitudes)

        def callback(step, tau, amps):
            if step % tr["trace_every"] == 0 or step == plan.steps:
                record(step, tau, amps)

        if p.tau_end > p.tau0:
            out = trotter_evolve(self.state, fam, coeff_fn, plan, callback)
        else:
            out = self.state.copy()
        self.traces["evolution"] = rows
        header = ["step", "tau", "norm", "energy"] + [f"N_k{k}" for k in tr["trace_modes"]] + ["discarded"]
        self.write("evolution_trace.csv", _table_csv(header, rows))
        self.report.results["evolve"] = {"final_norm": out.norm, "steps": plan.steps}
        save_snapshot(out, self.out / "state_final.bin")
        self._register("state_final.bin")
        self._register("state_final.bin.json")
        self.state = out
        return out

    def _observable(self, idx, req):
        st = self.state
        if req["kind"] == "correlator":
            sites = [int(s) for s in req["sites"]]
            if req["estimator"] == "sampled":
                return sample_estimate(st, sites, req["shots"], self.cfg["seed"] + idx)
            kind = "three_point" if len(sites) == 3 else "two_point"
            return CorrelatorResult(kind, tuple(sites), complex(expect_fields(st, sites)))
        return None

    def measure(self, tau=None):
        p, lat, cfg = self.params, self.lattice, self.cfg
        tau = p.tau_end if tau is None else tau
        st = self.state
        reqs = cfg["observables"]
        kinds = {r["kind"] for r in reqs}
        results = {}
        two = None
        if kinds & {"two_point_table", "power_spectrum"}:
            two = two_point_table(st)
            V = lat.volume
            self.write("two_point.csv", _table_csv(["x", "y", "value"],
                                                   [[x, y, two[x, y]] for x in range(V) for y in range(V)]))
            oracle = None
            if cfg["oracles"]["two_point"] and not self.interacting and not cfg["adiabatic"]["enabled"]:
                oracle = wightman_matrix(p, lat, tau, tau, "zz", cfg["prepare"]["vacuum"]).real
                err = float(np.abs(two - oracle).max() / np.abs(oracle).max())
                self.check("two_point_vs_mode_sum", err, self.tol["two_point_rtol"])
            results["two_point_table"] = two
            if cfg["figures"]:
                self._figure("two_point", two, oracle)
        if "power_spectrum" in kinds:
            P = power_spectrum(two[0], lat)
            k = lat.momenta[lat.nonzero]
            kn = np.linalg.norm(k, axis=1)
            P_modes = power_spectrum(wightman_matrix(p, lat, tau, tau, "zz").real[:, 0], lat)
            P_cont = continuum_power_spectrum(p, kn, tau)
            rows = [list(kk) + [P[i], P_modes[i], P_cont[i]] for i, kk in enumerate(k)]
            self.write("power_spectrum.csv", _table_csv([f"k{i}" for i in range(lat.d)]
                                                        + ["P_state", "P_lattice_modes", "P_continuum"], rows))
            results["plateau"] = plateau(p)
            if cfg["figures"]:
                self._figure("power_spectrum", kn, P, P_cont, plateau(p))
        three = None
        if kinds & {"three_point_table", "bispectrum"}:
            three = three_point_table(st)
            V = lat.volume
            self.write("three_point.csv", _table_csv(["y", "z", "value"],
                                                     [[y, z, three[y, z]] for y in range(V) for z in range(V)]))
            if cfg["oracles"]["inin_lattice"]:
                ref = inin_lattice(p, lat, rtol=cfg["oracles"]["inin_rtol"])
                self.write("inin_lattice.csv", _table_csv(["y", "z", "value"],
                                                          [[y, z, ref[y, z]] for y in range(V) for z in range(V)]))
                err = float(np.abs(three - ref).max() / np.abs(ref).max())
                self.check("three_point_vs_inin", err, self.tol["three_point_rtol"])
        for r in reqs:
            if r["kind"] == "bispectrum":
                k1, k2, k3 = r["k"]
                F = bispectrum(three, lat, k1, k2, k3, plateau(p))
                results.setdefault("bispectrum", []).append({"k": [k1, k2, k3], "F": F})
        if "bispectrum" in results:
            self.write("bispectrum.csv", _table_csv(["k1", "k2", "k3", "F"],
                                                    [b["k"] + [b["F"]] for b in results["bispectrum"]]))
        corr = [(i, r) for i, r in enumerate(reqs) if r["kind"] == "correlator"]
        if corr:
            with ThreadPoolExecutor(max_workers=cfg["workers"]) as pool:
                vals = list(pool.map(lambda ir: self._observable(*ir), corr))
            self.write("correlators.csv", correlator_csv(vals))
        self.report.results["measure"] = {"tau": tau, "plateau": results.get("plateau"),
                                          "bispectrum": results.get("bispectrum")}
        return results

    def _figure(self, which, *args):
        from . import figures
        name = f"figures/{which}.png"
        path = self.out / name
        if which == "two_point":
            figures.two_point_figure(args[0], args[1], path)
        elif which == "power_spectrum":
            figures.power_spectrum_figure(*args, path)
        else:
            figures.trace_figure(args[0], args[1], path)
        self._register(name)

    def invariants(self):
        """The extra invariant suite run by ``check``."""
        p, lat = self.params, self.lattice
        self.check("eft_hierarchy", 0.0, 0.0, passed=eft_hierarchy_ok(p, lat.b))
        worst = 0.0
        for tau in (p.tau0, p.tau_end):
            for om in lattice_omegas(lat)[lat.nonzero]:
                alpha, beta, _, _ = bogoliubov(p, float(om), tau)
                worst = max(worst, abs(abs(alpha) ** 2 - abs(beta) ** 2 - 1.0))
        self.check("bogoliubov_normalisation", worst, self.tol["bogoliubov_atol"])
        Kz, Kp = kernel_matrices(p, lat, p.tau0)
        self.check("kernel_identity_at_tau0", float(np.abs(Kz - np.eye(lat.volume)).max() + np.abs(Kp).max()),
                   0.0)
        if p.tau_end > p.tau0:
            rec = kernel_two_point(p, lat, p.tau_end, vacuum=self.cfg["prepare"]["vacuum"])
            ref = wightman_matrix(p, lat, p.tau_end, p.tau_end, "zz", self.cfg["prepare"]["vacuum"])
            self.check("kernel_reconstruction", float(np.abs(rec - ref).max() / np.abs(ref).max()),
                       self.tol["kernel_rtol"])
        prep = self.report.results.get("prepare", {})
        if "covariance_rel_error" in prep:
            self.check("vacuum_covariance", prep["covariance_rel_error"], self.tol["covariance_rtol"])
        if "energy_rel_excess" in prep:
            self.check("vacuum_energy_excess", prep["energy_rel_excess"], self.tol["energy_rtol"])
        ad = self.report.results.get("adiabatic")
        if ad and ad.get("infidelity") is not None:
            self.check("adiabatic_infidelity", ad["infidelity"], self.tol["adiabatic_infidelity"])
        ev = self.report.results.get("evolve")
        if ev:
            self.check("norm_conservation", abs(ev["final_norm"] - 1.0), self.tol["norm_atol"])

    def finish(self):
        if self.cfg["figures"]:
            for name, label in (("evolution", "tau"), ("adiabatic", "s")):
                rows = self.traces.get(name)
                if rows and len(rows) > 1:
                    self._figure(f"{name}_trace", rows, label)
        if self.report.failed_checks() and self.report.status == "ok":
            self.report.status = "invariant_failed"
        self.write("report.json", dumps(self.report.__dict__))
        manifest = {"version": __version__, "files": dict(sorted(self.files.items()))}
        (self.out / "manifest.json").write_text(dumps(manifest))


def run_pipeline(cfg: dict, stages=("budget", "prepare", "adiabatic", "evolve", "measure"),
                 invariants: bool = False, state_path=None) -> Pipeline:
    """Execute the staged pipeline; returns the Pipeline holding the report and outputs.

    Raises StageFailure tagged with the failing stage after writing partial outputs.
    """
    pipe = Pipeline(cfg)
    pipe.write("resolved_config.json", dumps(cfg))
    try:
        if state_path is not None:
            pipe.state = pipe.stage("load", load_snapshot, state_path)
        for name in stages:
            if name == "adiabatic" and not cfg["adiabatic"]["enabled"]:
                pipe.report.stages.append({"name": name, "status": "skipped"})
                continue
            pipe.stage(name, getattr(pipe, name))
        if invariants:
            pipe.stage("invariants", pipe.invariants)
    except StageFailure as exc:
        pipe.report.status = "failed"
        pipe.report.failure = {"stage": exc.stage, "error": type(exc.cause).__name__, "message": str(exc.cause),
                               "exit_code": exc.exit_code}
        pipe.finish()
        raise
    pipe.finish()
    return pipe


# -- subcommands -----------------------------------------------------------------

def _oracle(pipe: Pipeline, kind: str):
    p, lat, cfg = pipe.params, pipe.lattice, pipe.cfg
    out = {}
    if kind in ("inin", "both"):
        ks = cfg["oracles"]["inin_ks"]
        out["inin_tree_B"] = inin_tree(p, ks, damping=cfg["oracles"]["inin_damping"])
        out["inin_ks"] = ks
        ref = inin_lattice(p, lat, rtol=cfg["oracles"]["inin_rtol"])
        V = lat.volume
        pipe.write("inin_lattice.csv", _table_csv(["y", "z", "value"],
                                                  [[y, z, ref[y, z]] for y in range(V) for z in range(V)]))
    if kind in ("dense", "both"):
        fam = pipe.family()
        n = cfg["oracles"]["dense_levels"]
        rows = []
        for s in (0.0, 1.0):
            w, _ = interacting_ground_state(fam, p.tau0, s, n_states=n)
            w = np.sort(np.asarray(w))[:n]
            rows += [[s, i, e, e - w[0]] for i, e in enumerate(w)]
        pipe.write("dense_spectrum.csv", _table_csv(["coupling_scale", "level", "energy", "gap"], rows))
        out["free_gap_modes"] = free_gap(p, lat)
        out["free_gap_dense"] = rows[1][3] if len(rows) > 1 else None
    pipe.report.results["oracle"] = out
    pipe.write("oracle.json", dumps(out))
    return out


def _global_flags() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", help="run config (JSON); env INFLASIM_CONFIG")
    g.add_argument("--out", help="output directory; env INFLASIM_OUT")
    g.add_argument("--seed", type=int, help="PRNG seed for sampled estimators; env INFLASIM_SEED")
    g.add_argument("--workers", type=int, help="worker threads for independent measurements; env INFLASIM_WORKERS")
    g.add_argument("--tolerance-profile", choices=sorted(PROFILES),
                   help="oracle tolerances; env INFLASIM_TOLERANCE_PROFILE")
    return g


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inflasim", description="Desk-scale lattice inflation emulator.")
    parser.add_argument("--version", action="version", version=f"inflasim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    g = [_global_flags()]
    p = sub.add_parser("modes", parents=g, help="mode table and dispersion")
    p.add_argument("--tau", type=float, help="conformal time (default tau0)")
    p = sub.add_parser("budget", parents=g, help="encoding, gate and lattice-error budgets")
    p.add_argument("--efolds", type=float, help="override tau_end so the run spans this many e-folds")
    p = sub.add_parser("kernel", parents=g, help="reconstruction kernels for one site")
    p.add_argument("--site", type=int, default=0)
    p.add_argument("--tau", type=float, help="target time (default tau_end)")
    p.add_argument("--truncate", action="store_true", help="restrict support to the padded light cone")
    sub.add_parser("prepare", parents=g, help="synthesise the free vacuum and report diagnostics")
    p = sub.add_parser("evolve", parents=g, help="adiabatic preparation and Trotter evolution with traces")
    p.add_argument("--state", help="start from this snapshot instead of preparing the vacuum")
    p = sub.add_parser("measure", parents=g, help="correlators on a state snapshot")
    p.add_argument("--state", required=True, help="snapshot to measure")
    p.add_argument("--tau", type=float, help="time the snapshot represents (default tau_end)")
    p = sub.add_parser("oracle", parents=g, help="in-in quadrature and dense diagonalisation")
    p.add_argument("--kind", choices=("inin", "dense", "both"), default="both")
    p = sub.add_parser("check", parents=g, help="full pipeline plus the invariant suite")
    p.add_argument("configs", nargs="*", help="further configs to check")
    sub.add_parser("run", parents=g, help="full pipeline")
    return parser


def _env(args, name, cast=str):
    v = getattr(args, name)
    if v is not None:
        return v
    e = os.environ.get(ENV_PREFIX + name.upper())
    if e is None or e == "":
        return None
    try:
        return cast(e)
    except ValueError:
        raise ConfigError(f"environment variable {ENV_PREFIX + name.upper()}={e!r} is invalid") from None


def _settings(args):
    return {"out": _env(args, "out"), "seed": _env(args, "seed", int), "workers": _env(args, "workers", int),
            "profile": _env(args, "tolerance_profile")}


def _resolve_from(path, args, out_override=None, raw_edit=None):
    raw = load_config(path)
    if raw_edit:
        raw = raw_edit(raw)
    s = _settings(args)
    if out_override is not None:
        s["out"] = out_override
    if s["profile"] is not None and s["profile"] not in PROFILES:
        raise ConfigError(f"unknown tolerance profile {s['profile']!r}")
    return resolve_config(raw, **s)


def _print_checks(label, pipe):
    for name, c in sorted(pipe.report.checks.items()):
        flag = "PASS" if c["passed"] else "FAIL"
        print(f"{flag} {label} {name}: {c['value']:.3e} (tolerance {c['tolerance']:.1e})")


def _dispatch(args) -> int:
    config = _env(args, "config")
    if config is None:
        raise StageFailure("config", ConfigError("no config given (--config or INFLASIM_CONFIG)"))
    cmd = args.command

    def resolve(path=config, out=None, edit=None):
        try:
            return _resolve_from(path, args, out, edit)
        except InflasimError as exc:
            raise StageFailure("config", exc) from exc

    if cmd == "budget" and args.efolds is not None:
        def edit(raw):
            raw = copy.deepcopy(raw)
            cos = raw.setdefault("cosmology", {})
            tau0 = cos.get("tau0", DEFAULTS["cosmology"]["tau0"])
            cos["tau_end"] = tau0 * math.exp(-args.efolds)
            return raw
        cfg = resolve(edit=edit)
    else:
        cfg = resolve()

    if cmd == "run":
        pipe = run_pipeline(cfg)
        _print_checks(Path(config).stem, pipe)
        return InvariantError.exit_code if pipe.report.failed_checks() else 0
    if cmd == "check":
        failed = False
        paths = [config] + list(args.configs)
        for i, path in enumerate(paths):
            c = cfg if i == 0 else resolve(path, out=str(Path(cfg["output_dir"]) / Path(path).stem))
            pipe = run_pipeline(c, invariants=True)
            _print_checks(Path(path).stem, pipe)
            failed = failed or bool(pipe.report.failed_checks())
        print("check: " + ("FAILED" if failed else "all invariants pass"))
        return InvariantError.exit_code if failed else 0
    if cmd == "modes":
        pipe = Pipeline(cfg)
        pipe.stage("modes", pipe.modes, args.tau)
    elif cmd == "budget":
        pipe = Pipeline(cfg)
        out = pipe.stage("budget", pipe.budget)
        g = out["gates"]
        print(f"efolds {out['efolds']:.6g}")
        print(f"qubits {out['grid']['qubits_total']} (n_b {out['grid']['n_b']} per site)")
        print(f"n_ad_total {g['n_ad_total']:.6e}")
        print(f"n_inflation_total {g['n_inflation_total']:.6e}")
        if g["n_inflation_total"] > GATE_WARNING:
            print("warning: no simulation attempted at this size", file=sys.stderr)
    elif cmd == "kernel":
        pipe = Pipeline(cfg)
        p = pipe.params
        tau = p.tau_end if args.tau is None else args.tau
        x = pipe.lattice.coords[args.site % pipe.lattice.volume]
        ker = pipe.stage("kernel", hkll_kernel, p, pipe.lattice, tau, x, args.truncate)
        pipe.write("kernel.csv", ker.to_csv())
        pipe.report.results["kernel"] = {"site": int(args.site), "tau": tau, "residual": ker.residual}
    elif cmd == "prepare":
        pipe = run_pipeline(cfg, stages=("budget", "prepare"))
        return 0
    elif cmd == "evolve":
        stages = ("adiabatic", "evolve") if args.state else ("prepare", "adiabatic", "evolve")
        pipe = run_pipeline(cfg, stages=stages, state_path=args.state)
        return 0
    elif cmd == "measure":
        pipe = Pipeline(cfg)
        pipe.write("resolved_config.json", dumps(cfg))
        pipe.state = pipe.stage("load", load_snapshot, args.state)
        try:
            pipe.stage("measure", pipe.measure, args.tau)
        finally:
            pipe.finish()
        _print_checks(Path(config).stem, pipe)
        return InvariantError.exit_code if pipe.report.failed_checks() else 0
    elif cmd == "oracle":
        pipe = Pipeline(cfg)
        pipe.stage("oracle", _oracle, pipe, args.kind)
    pipe.write("resolved_config.json", dumps(cfg))
    pipe.finish()
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except StageFailure as exc:
        print(f"error {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
