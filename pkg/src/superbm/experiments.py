"""Experiment drivers: ensemble statistics, tolerance gates, and orchestration.

Workers receive a JSON-able context, rebuild the test functions and integrands
locally (closures do not pickle), simulate their replicate from a counter-based
key (master seed, replicate index) and return a small dict of statistics.
Results are reduced in replicate order, so every aggregate is bit-identical
for any worker count.  Capped replicates are excluded from statistics and
counted in the manifest: silent truncation of heavy excursions would bias
every moment.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (ConfigError, ExperimentConfig, RunManifest, build_basis,
                     build_initial_measure, build_integrand, build_test_function,
                     target_values_from_spec)
from .galerkin import (BasisSamples, GalerkinSolution, check_adjoint, fit, fitted_norm_sq,
                       planted_target, residual)
from .integrals import (PathFieldCache, closed_form_series, integrate, integrate_series,
                        quadrature_cross)
from .paths import TimeGrid
from .simulate import PopulationCapExceeded, SimParams, replicate_rng, simulate
from .stats import Estimate, mean_se, parallel_map, resolve_jobs, variance_se
from .storage import sha256_file, write_csv, write_json


CHI2_95 = {1: 3.841458820694124, 2: 5.991464547107979, 3: 7.814727903251179,
           4: 9.487729036781154, 5: 11.070497693516351, 6: 12.591587243743977,
           7: 14.067140449340169, 8: 15.50731305586545}


# -- analytic targets ---------------------------------------------------------

def heat_semigroup_gaussian(h_spec: dict, t: float, measure_spec: dict) -> float:
    """<m, S_t h> for a Gaussian bump h and an atomic initial measure m."""
    if h_spec.get("family") != "gaussian":
        raise ConfigError("heat-semigroup target needs a gaussian test function")
    c = np.asarray(h_spec["center"], dtype=np.float64)
    sigma = float(h_spec["sigma"])
    amp = float(h_spec.get("amplitude", 1.0))
    d = c.size
    s2t = sigma * sigma + t
    total = 0.0
    for atom in measure_spec["atoms"]:
        y = np.asarray(atom["position"], dtype=np.float64)
        r2 = float(np.dot(y - c, y - c))
        total += atom["mass"] * amp * (sigma * sigma / s2t) ** (d / 2.0) * math.exp(-r2 / (2.0 * s2t))
    return total


def extinction_probability(z0: float, horizon: float, rate: float = 1.0) -> float:
    """Continuum target exp(-2 z0 / (rate * t)) for total-mass extinction by t."""
    return math.exp(-2.0 * z0 / (rate * horizon))


def extinction_probability_particle(n0: int, horizon: float, rate: float, n_quantum: int) -> float:
    """Exact extinction probability of the N-particle system by time t."""
    lam_t = rate * n_quantum * horizon
    return (lam_t / (2.0 + lam_t)) ** n0


# -- ensemble runner ----------------------------------------------------------

@dataclass
class EnsembleResult:
    arrays: dict
    n_requested: int
    capped_indices: list
    mass_rounded: bool

    @property
    def n_used(self) -> int:
        return self.n_requested - len(self.capped_indices)


class _SpecMemo:
    """Build-once cache for spec dicts inside one worker call, so identical
    specs share one object and hence one evaluation in the path cache."""

    def __init__(self):
        self._objs = {}

    def test_function(self, spec: dict, where: str):
        key = json.dumps(spec, sort_keys=True)
        if key not in self._objs:
            self._objs[key] = build_test_function(spec, where)
        return self._objs[key]

    def integrand(self, spec: dict, where: str):
        key = ("phi", json.dumps(spec, sort_keys=True))
        if key not in self._objs:
            self._objs[key] = build_integrand(spec, where)
        return self._objs[key]


def _shared_basis(memo: _SpecMemo, specs: list):
    from .galerkin import IntegrandBasis
    from .testfuncs import ProductIntegrand

    elements = []
    for i, spec in enumerate(specs):
        phi = memo.integrand(spec, f"basis[{i}]")
        # rebuild around the memoized h so equal spatial specs share id()
        h = memo.test_function(spec["h"], f"basis[{i}].h")
        elements.append(ProductIntegrand(weight=phi.weight, window_start=phi.window_start,
                                         h=h, label=phi.label))
    return IntegrandBasis(tuple(elements))


def _stat_worker(i: int, ctx: dict) -> dict:
    grid = TimeGrid.from_step(ctx["horizon"], ctx["dt"])
    params = SimParams(n_quantum=ctx["n_quantum"], dim=ctx["dimension"], grid=grid,
                       branching_rate=ctx["branching_rate"], seed=ctx["master_seed"],
                       cap_factor=ctx["cap_factor"])
    m = build_initial_measure(ctx["initial_measure"])
    rng = replicate_rng(ctx["master_seed"], i)
    try:
        path = simulate(m, params, record_states=ctx["record_states"],
                        record_events=ctx["record_events"],
                        track_motion=ctx.get("track_motion", True), rng=rng)
    except PopulationCapExceeded as exc:
        return {"capped": True, "capped_step": exc.step, "capped_population": exc.population}
    out: dict = {"capped": False, "mass_rounded": path.meta["mass_rounded"]}
    mass = path.total_mass_series()

    if ctx.get("mass_checkpoints"):
        idx = [grid.index_of(t) for t in ctx["mass_checkpoints"]]
        out["z_checks"] = mass[idx]
    out["z_terminal"] = float(mass[-1])

    memo = _SpecMemo()
    cache = PathFieldCache(path) if (ctx.get("mp_phis") or ctx.get("heat_h")
                                     or ctx.get("basis") or ctx.get("rep_integrands")) else None

    for j, h_spec in enumerate(ctx.get("mp_phis") or []):
        h = memo.test_function(h_spec, f"mp_phis[{j}]")
        p = cache.series(h)
        hl = cache.half_laplacian_series(h)
        drift = np.concatenate([[0.0], np.cumsum(hl[:-1])]) * grid.dt
        m_series = p - p[0] - drift
        qv = float(np.trapezoid(cache.series_product(h, h), dx=grid.dt))
        if ctx.get("mp_full_series"):
            out[f"mp{j}_series"] = m_series
        if ctx.get("mp_checkpoints"):
            cidx = [grid.index_of(t) for t in ctx["mp_checkpoints"]]
            out[f"mp{j}_checks"] = m_series[cidx]
        out[f"mp{j}_mt2"] = float(m_series[-1] ** 2)
        out[f"mp{j}_qv"] = qv

    if ctx.get("heat_h"):
        h = memo.test_function(ctx["heat_h"], "heat_h")
        out["heat"] = float(cache.series(h)[-1])

    if ctx.get("basis"):
        basis = _shared_basis(memo, ctx["basis"])
        n = len(basis)
        z = np.empty(n)
        icf = np.empty(n)
        for j, phi in enumerate(basis):
            z[j] = integrate(phi, path, grid.horizon, cache)
            icf[j] = float(closed_form_series(phi, path, cache)[-1])
        out["z"] = z
        out["icf"] = icf
        if not ctx.get("basis_light"):
            q = np.empty((n, n))
            for a in range(n):
                for b in range(a, n):
                    q[a, b] = q[b, a] = quadrature_cross(basis.elements[a],
                                                         basis.elements[b], path, cache)
            out["q"] = q

    for j, spec in enumerate(ctx.get("rep_integrands") or []):
        phi = memo.integrand(spec, f"rep_integrands[{j}]")
        f_series = closed_form_series(phi, path, cache)
        e_series = integrate_series(phi, path, cache)
        out[f"rep{j}_sup"] = float(np.max(np.abs(f_series - e_series)))

    return out


def run_stat_ensemble(ctx: dict, replicates: int, n_jobs: int | None = None) -> EnsembleResult:
    results = parallel_map(_stat_worker, replicates, ctx, n_jobs=n_jobs)
    capped = [i for i, r in enumerate(results) if r["capped"]]
    keys = None
    for r in results:
        if not r["capped"]:
            keys = [k for k in r if k not in ("capped", "mass_rounded")]
            break
    if keys is None:
        raise RuntimeError(f"all {replicates} replicates hit the population cap")
    arrays = {k: np.asarray([r[k] for r in results if not r["capped"]]) for k in keys}
    rounded = any(r.get("mass_rounded", False) for r in results if not r["capped"])
    return EnsembleResult(arrays, replicates, capped, rounded)


def base_ctx(cfg: ExperimentConfig, **extra) -> dict:
    ctx = {
        "dimension": cfg.dimension, "horizon": cfg.horizon, "dt": cfg.dt,
        "n_quantum": cfg.n_quantum, "branching_rate": cfg.branching_rate,
        "cap_factor": cfg.cap_factor, "master_seed": cfg.seed,
        "initial_measure": cfg.initial_measure,
        "record_states": True, "record_events": True,
    }
    ctx.update(extra)
    return ctx


# -- gates --------------------------------------------------------------------

@dataclass
class Gate:
    name: str
    estimate: float
    se: float
    target: float
    tolerance: float
    passed: bool
    kind: str
    note: str = ""

    def row(self) -> list:
        return [self.name, self.estimate, self.se, self.target, self.tolerance,
                self.kind, self.passed, self.note]


GATE_HEADER = ["gate", "estimate", "se", "target", "tolerance", "kind", "passed", "note"]


def gate_3se(name: str, est: Estimate, target: float, k: float = 3.0, note: str = "") -> Gate:
    tol = k * est.se
    return Gate(name, est.value, est.se, target, tol,
                bool(abs(est.value - target) <= tol), f"{k:g}se", note)


def gate_combined_se(name: str, lhs: Estimate, rhs: Estimate, k: float = 3.0,
                     note: str = "") -> Gate:
    tol = k * (lhs.se + rhs.se)
    gap = lhs.value - rhs.value
    return Gate(name, lhs.value, lhs.se, rhs.value, tol, bool(abs(gap) <= tol),
                f"{k:g}combined_se", note)


def gate_abs(name: str, est: Estimate, target: float, tol: float, note: str = "") -> Gate:
    return Gate(name, est.value, est.se, target, tol,
                bool(abs(est.value - target) <= tol), "abs", note)


def gate_rel(name: str, est: Estimate, target: float, rel_tol: float, note: str = "") -> Gate:
    tol = rel_tol * abs(target)
    return Gate(name, est.value, est.se, target, tol,
                bool(abs(est.value - target) <= tol), f"rel({rel_tol:g})", note)


def gate_decrease(name: str, refined: float, base: float, min_drop: float,
                  note: str = "") -> Gate:
    # passes when refined <= (1 - min_drop) * base
    tol = (1.0 - min_drop) * base
    return Gate(name, refined, float("nan"), base, tol, bool(refined <= tol),
                f"drop>={min_drop:g}", note)


def gate_bound(name: str, est: Estimate, bound: float, note: str = "") -> Gate:
    return Gate(name, est.value, est.se, bound, bound, bool(est.value <= bound),
                "upper_bound", note)

# -- drivers ------------------------------------------------------------------

def run_simulate(cfg: ExperimentConfig, out_dir: Path, n_jobs: int | None = None) -> dict:
    """Persist an ensemble: one event log (and states) per replicate, plus a
    mass-series CSV and the run manifest.  Single-writer file IO."""
    from .storage import write_event_log, write_states

    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.time()
    m = cfg.measure()
    capped = []
    rounded = False
    mass_rows = []
    files = []
    for i in range(cfg.replicates):
        params = cfg.sim_params()
        rng = replicate_rng(cfg.seed, i)
        try:
            path = simulate(m, params, record_states=cfg.record_states,
                            record_events=cfg.record_events, rng=rng)
        except PopulationCapExceeded:
            capped.append(i)
            continue
        rounded = rounded or path.meta["mass_rounded"]
        if cfg.record_events:
            f = out_dir / f"rep_{i:05d}.sbmx"
            write_event_log(f, path.events)
            files.append(f)
        if cfg.record_states:
            f = out_dir / f"rep_{i:05d}_states.npz"
            write_states(f, path)
            files.append(f)
        mass_rows.append([i] + path.total_mass_series().tolist())
    grid = cfg.grid()
    mass_csv = out_dir / "mass_series.csv"
    write_csv(mass_csv, ["replicate"] + [f"t={t!r}" for t in grid.times.tolist()], mass_rows)
    files.append(mass_csv)
    manifest = RunManifest(config=cfg.to_dict(), replicates_run=cfg.replicates,
                           capped_replicates=len(capped), capped_indices=capped,
                           mass_rounded=rounded,
                           wall_clock_seconds=time.time() - t_start)
    manifest.artifact_checksums = {f.name: sha256_file(f) for f in files}
    manifest.write(out_dir / "manifest.json")
    return {"files": [f.name for f in files], "capped": capped}


def run_verify_mp(cfg: ExperimentConfig, n_jobs: int | None = None,
                  checkpoints: list | None = None) -> tuple[list, dict]:
    """Martingale-problem gates for the configured test functions."""
    if cfg.phi is None:
        raise ConfigError("phi: verify-mp needs at least one test function spec")
    phis = [cfg.phi["h"] if "h" in cfg.phi else cfg.phi]
    if cfg.psi is not None:
        phis.append(cfg.psi["h"] if "h" in cfg.psi else cfg.psi)
    if checkpoints is None:
        t = cfg.horizon
        checkpoints = [t / 5, 2 * t / 5, 3 * t / 5, 4 * t / 5, t]
    ctx = base_ctx(cfg, mp_phis=phis, mp_checkpoints=checkpoints, mp_full_series=True,
                   record_events=False)
    res = run_stat_ensemble(ctx, cfg.replicates, n_jobs)
    gates = []
    summary = {"n_used": res.n_used, "capped": len(res.capped_indices),
               "checkpoints": checkpoints}
    for j in range(len(phis)):
        checks = res.arrays[f"mp{j}_checks"]
        for c, t_c in enumerate(checkpoints):
            est = mean_se(checks[:, c])
            gates.append(gate_3se(f"mp{j}_mean_t{t_c:g}", est, 0.0,
                                  note="martingale mean-zero"))
        mt2 = res.arrays[f"mp{j}_mt2"]
        qv = res.arrays[f"mp{j}_qv"]
        gates.append(gate_3se(f"mp{j}_qv_gap", mean_se(mt2 - qv), 0.0,
                              note="paired E[M(T)^2] - E[int <X,phi^2>]"))
        series = res.arrays[f"mp{j}_series"]
        mean_m = series.mean(axis=0)
        se_m = series.std(axis=0, ddof=1) / np.sqrt(series.shape[0])
        worst = int(np.argmax(np.abs(mean_m)))
        summary[f"mp{j}_max_abs_mean"] = float(np.abs(mean_m[worst]))
        summary[f"mp{j}_max_abs_mean_se"] = float(se_m[worst])
    return gates, summary


def run_verify_iso(cfg: ExperimentConfig, n_jobs: int | None = None) -> tuple[list, dict]:
    """Isometry / covariation gates.

    With a basis: per-element norm isometry battery.  With phi (and psi):
    pairwise covariation identity.
    """
    gates = []
    summary: dict = {}
    if cfg.basis:
        ctx = base_ctx(cfg, basis=cfg.basis)
        res = run_stat_ensemble(ctx, cfg.replicates, n_jobs)
        z = res.arrays["z"]
        icf = res.arrays["icf"]
        q = res.arrays["q"]
        for i in range(z.shape[1]):
            lhs = mean_se(icf[:, i] ** 2)
            rhs = mean_se(q[:, i, i])
            gates.append(gate_combined_se(f"iso_{i}", lhs, rhs,
                                          note="closed-form norm vs quadrature norm"))
        paired = mean_se(np.sum(icf ** 2 - z ** 2, axis=1))
        summary = {"n_used": res.n_used, "capped": len(res.capped_indices),
                   "paired_gap": paired.value, "paired_gap_se": paired.se}
    elif cfg.phi is not None:
        specs = [cfg.phi, cfg.psi if cfg.psi is not None else cfg.phi]
        ctx = base_ctx(cfg, basis=specs)
        res = run_stat_ensemble(ctx, cfg.replicates, n_jobs)
        z = res.arrays["z"]
        q = res.arrays["q"]
        lhs = mean_se(z[:, 0] * z[:, 1])
        rhs = mean_se(q[:, 0, 1])
        gates.append(gate_combined_se("covariation", lhs, rhs,
                                      note="E[I(phi)I(psi)] vs E[int <X,phi psi>]"))
        summary = {"n_used": res.n_used, "capped": len(res.capped_indices)}
    else:
        raise ConfigError("verify-iso needs a basis or phi/psi integrand specs")
    return gates, summary


def run_vderiv(cfg: ExperimentConfig, t: float, x, n_jobs: int | None = None) -> dict:
    """Vertical derivative of the configured functional on one simulated path."""
    from .config import build_functional
    from .functionals import (vertical_derivative, vertical_derivative_richardson)
    from .paths import stop

    if cfg.functional is None:
        raise ConfigError("functional: vderiv needs a functional spec")
    f = build_functional(cfg.functional)
    m = cfg.measure()
    path = simulate(m, cfg.sim_params(), rng=replicate_rng(cfg.seed, 0))
    sp = stop(path, t)
    eps = 1e-3 * max(sp.total_mass_at_stop(), 1e-12) or 1e-3
    d1, d2, extrap = vertical_derivative_richardson(f, t, sp, x, eps)
    analytic = f.analytic_vderiv(t, sp, x)
    return {
        "t": t, "x": list(np.atleast_1d(np.asarray(x, dtype=float))),
        "fd_eps": d1, "fd_eps_half": d2, "richardson": extrap,
        "analytic": analytic,
        "value": float(analytic) if analytic is not None else extrap,
        "functional_value": f.evaluate(t, sp),
    }


def _fit_and_check(basis_specs: list, fit_samples: BasisSamples, hold_samples: BasisSamples,
                   g_fit: np.ndarray, g_hold: np.ndarray, ridge, chi2_ref=None) -> dict:
    basis = build_basis(basis_specs)
    solution = fit(basis, fit_samples, g_fit, ridge=ridge)
    res, var_g = residual(g_hold, hold_samples, solution)
    out = {
        "coefficients": solution.coefficients.tolist(),
        "coefficient_cov": solution.coefficient_cov.tolist(),
        "condition": solution.condition,
        "ridge": solution.ridge,
        "center": solution.center,
        "residual": res.value, "residual_se": res.se,
        "target_variance": var_g,
        "relative_residual": res.value / var_g if var_g > 0 else float("inf"),
    }
    if chi2_ref is not None:
        out["chi2"] = solution.joint_chi2(np.asarray(chi2_ref, dtype=np.float64))
        out["chi2_crit"] = CHI2_95[len(chi2_ref)]
    return out, solution


def run_represent(cfg: ExperimentConfig, n_jobs: int | None = None) -> tuple[list, dict]:
    """Galerkin fit of the configured target over a fit/holdout split."""
    if not cfg.basis:
        raise ConfigError("basis: represent needs a basis")
    if cfg.target is None:
        raise ConfigError("target: represent needs a target spec")
    from .config import build_target
    target_spec = build_target(cfg.target)

    heat_h = cfg.target.get("h") if cfg.target.get("kind") == "terminal_pairing" else None
    ctx = base_ctx(cfg, basis=cfg.basis, heat_h=heat_h)
    res = run_stat_ensemble(ctx, cfg.replicates, n_jobs)
    n_used = res.n_used
    if n_used < 4:
        raise RuntimeError("need at least 4 usable replicates for a fit/holdout split")
    half = n_used // 2
    samples = BasisSamples(res.arrays["z"], res.arrays["q"])
    fit_s = BasisSamples(samples.z[:half], samples.q[:half])
    hold_s = BasisSamples(samples.z[half:], samples.q[half:])
    planted = None
    if target_spec["kind"] == "planted":
        coeffs = target_spec["coefficients"]
        if len(coeffs) != samples.n_basis:
            raise ConfigError(
                f"target.coefficients: {len(coeffs)} coefficients for a basis of "
                f"{samples.n_basis}")
        planted = planted_target(samples, coeffs)
    g_all = target_values_from_spec(
        target_spec, res.arrays.get("heat"), res.arrays["z_terminal"], planted)
    g_fit, g_hold = g_all[:half], g_all[half:]
    chi2_ref = target_spec.get("coefficients") if target_spec["kind"] == "planted" else None
    report, solution = _fit_and_check(cfg.basis, fit_s, hold_s, g_fit, g_hold,
                                      cfg.ridge, chi2_ref)
    gates = []
    rel_tol = cfg.tolerances.get("relative_residual", 0.05)
    if target_spec["kind"] == "planted":
        gates.append(Gate("galerkin_chi2", report["chi2"], float("nan"),
                          0.0, report["chi2_crit"],
                          bool(report["chi2"] <= report["chi2_crit"]), "chi2_95",
                          note="joint CI covers planted coefficients"))
        gates.append(Gate("galerkin_residual", report["relative_residual"], float("nan"),
                          0.0, rel_tol, bool(report["relative_residual"] <= rel_tol),
                          "rel_residual", note="holdout residual / Var[G]"))
    for i in range(samples.n_basis):
        rep = check_adjoint(i, g_hold, hold_s, solution)
        gates.append(gate_combined_se(f"adjoint_{i}", rep.lhs, rep.rhs,
                                      note="E[I(phi_i) Ytilde] vs E[int phi_i grad]"))
    report["n_used"] = n_used
    report["capped"] = len(res.capped_indices)
    return gates, report


def _initial_mass(cfg: ExperimentConfig) -> float:
    return build_initial_measure(cfg.initial_measure).total_mass()


# -- canonical full-suite objects ---------------------------------------------

def _snap(grid: TimeGrid, t: float) -> float:
    """Nearest grid time (suite specs must land exactly on the grid)."""
    k = int(round(t / grid.dt))
    k = min(max(k, 0), grid.n_steps)
    return k * grid.dt


def default_suite_spec(cfg: ExperimentConfig) -> dict:
    """The canonical test objects of the verification suite, scaled to the grid.

    Four basis integrands (two deterministic weights, two path-dependent
    ones, one deliberately narrow bump whose motion noise carries the finite-N
    signal for the trend tests), two martingale-problem test functions, one
    heat-kernel probe, and the planted coefficients for the recovery test.
    """
    grid = cfg.grid()
    t = cfg.horizon
    d = cfg.dimension
    c0 = [0.0] * d

    def shifted(x):
        return [x] + [0.0] * (d - 1)

    ga = {"family": "gaussian", "center": c0, "sigma": 1.0, "amplitude": 1.0}
    gb = {"family": "gaussian", "center": shifted(0.5), "sigma": 0.7, "amplitude": 0.8}
    basis = [
        {"label": "phi1", "window_start": _snap(grid, 0.25 * t),
         "h": {"family": "gaussian", "center": c0, "sigma": 1.0, "amplitude": 1.0}},
        {"label": "phi2", "window_start": _snap(grid, 0.25 * t),
         "weight": {"measure_time": _snap(grid, 0.1 * t),
                    "probe": {"family": "gaussian", "center": c0, "sigma": 0.8,
                              "amplitude": 1.0},
                    "map": {"kind": "tanh"}},
         "h": {"family": "gaussian", "center": shifted(0.6), "sigma": 0.8, "amplitude": 1.0}},
        {"label": "phi3", "window_start": _snap(grid, 0.1 * t),
         "h": {"family": "gaussian", "center": c0, "sigma": 0.15, "amplitude": 1.0}},
        {"label": "phi4", "window_start": _snap(grid, 0.5 * t),
         "weight": {"measure_time": _snap(grid, 0.2 * t),
                    "probe": {"family": "gaussian", "center": shifted(0.3), "sigma": 0.5,
                              "amplitude": 1.0},
                    "map": {"kind": "clip", "lo": -1.0, "hi": 2.0}},
         "h": {"family": "gaussian", "center": shifted(-0.4), "sigma": 0.6, "amplitude": 0.9}},
    ]
    return {
        "mp_phis": [ga, gb],
        "heat_h": dict(ga),
        "basis": basis,
        "planted_coefficients": [2.0, 0.0, 0.5, 0.0],
        "mass_checkpoints": [_snap(grid, 0.25 * t), _snap(grid, 0.5 * t), t],
        "mp_checkpoints": [_snap(grid, f * t) for f in (0.2, 0.4, 0.6, 0.8, 1.0)],
    }


def _vderiv_probe_gate(cfg: ExperimentConfig, basis_specs: list, n_probes: int,
                       tol: float) -> Gate:
    """Exactness of one-sided difference quotients for the suite functionals."""
    from .functionals import ProductIntegralFunctional, vertical_derivative_fd
    from .paths import stop

    basis = build_basis(basis_specs)
    rng = np.random.default_rng(cfg.seed ^ 0xD1FF)
    m = cfg.measure()
    grid = cfg.grid()
    worst = 0.0
    n_paths = max(2, min(4, n_probes // 30))
    probes_per = max(1, n_probes // (n_paths * len(basis)))
    for p in range(n_paths):
        path = simulate(m, cfg.sim_params(), record_events=False,
                        rng=replicate_rng(cfg.seed ^ 0xD1FF, p))
        for phi in basis:
            f = ProductIntegralFunctional(phi)
            for _ in range(probes_per):
                k = int(rng.integers(0, grid.n_steps + 1))
                t_probe = grid.times[k]
                x = rng.normal(0.0, 1.0, size=cfg.dimension)
                sp = stop(path, t_probe)
                eps = 1e-3 * max(sp.total_mass_at_stop(), 1.0)
                fd = vertical_derivative_fd(f, t_probe, sp, x, eps)
                analytic = f.analytic_vderiv(t_probe, sp, x)
                worst = max(worst, abs(fd - analytic))
    return Gate("vderiv_exactness", worst, float("nan"), 0.0, tol,
                bool(worst <= tol), "abs",
                note=f"max |fd - analytic| over {n_paths} paths x {len(basis)} functionals")


def run_full_suite(cfg: ExperimentConfig, n_jobs: int | None = None) -> tuple[list, dict]:
    """The whole verification battery at the configured scale."""
    tol = cfg.tolerances
    suite = default_suite_spec(cfg)
    if cfg.basis:
        suite["basis"] = cfg.basis
    gates: list[Gate] = []
    summary: dict = {"scale": {"n_quantum": cfg.n_quantum, "dt": cfg.dt,
                               "horizon": cfg.horizon, "replicates": cfg.replicates,
                               "dimension": cfg.dimension, "seed": cfg.seed}}
    z0 = _initial_mass(cfg)
    rate = cfg.branching_rate

    # main ensemble: mass checkpoints, martingale problem, heat probe, basis stats
    ctx_main = base_ctx(cfg, mass_checkpoints=suite["mass_checkpoints"],
                        mp_phis=suite["mp_phis"], mp_checkpoints=suite["mp_checkpoints"],
                        heat_h=suite["heat_h"], basis=suite["basis"])
    res = run_stat_ensemble(ctx_main, cfg.replicates, n_jobs)
    summary["main"] = {"n_used": res.n_used, "capped": len(res.capped_indices)}

    # 1. mass conservation in mean
    for c, t_c in enumerate(suite["mass_checkpoints"]):
        est = mean_se(res.arrays["z_checks"][:, c])
        gates.append(gate_3se(f"c01_mass_mean_t{t_c:g}", est, z0,
                              note="E[Z_t] = Z_0"))

    # 2. total-mass variance (dedicated mass-only ensemble)
    r_var = int(tol.get("variance_replicates", cfg.replicates))
    ctx_var = base_ctx(cfg, record_states=False, record_events=False, track_motion=False)
    ctx_var["master_seed"] = cfg.seed + 1_000_003
    res_var = run_stat_ensemble(ctx_var, r_var, n_jobs)
    var_target = rate * cfg.horizon * z0
    gates.append(gate_rel("c02_mass_variance", variance_se(res_var.arrays["z_terminal"]),
                          var_target, float(tol.get("variance_rel_tol", 0.10)),
                          note=f"Var[Z_T] over {res_var.n_used} mass-only replicates"))
    summary["variance"] = {"n_used": res_var.n_used, "capped": len(res_var.capped_indices)}

    # 3. extinction probability at the extended horizon
    t_ext = float(tol.get("extinction_horizon", 2.0 * cfg.horizon))
    n_ext = int(tol.get("extinction_n_quantum", cfg.n_quantum))
    r_ext = int(tol.get("extinction_replicates", cfg.replicates))
    ctx_ext = base_ctx(cfg, record_states=False, record_events=False, track_motion=False)
    ctx_ext.update({"horizon": t_ext, "n_quantum": n_ext,
                    "master_seed": cfg.seed + 2_000_003})
    res_ext = run_stat_ensemble(ctx_ext, r_ext, n_jobs)
    extinct = (res_ext.arrays["z_terminal"] == 0.0).astype(np.float64)
    p_target = extinction_probability(z0, t_ext, rate)
    p_exact = extinction_probability_particle(int(round(n_ext * z0)), t_ext, rate, n_ext)
    gates.append(gate_abs("c03_extinction", mean_se(extinct), p_target,
                          float(tol.get("extinction_abs_tol", 0.03)),
                          note=f"particle-exact value {p_exact:.6f}, N={n_ext}, "
                               f"R={res_ext.n_used}"))
    summary["extinction"] = {"n_used": res_ext.n_used, "capped": len(res_ext.capped_indices),
                             "horizon": t_ext, "n_quantum": n_ext}

    # 4. heat-semigroup mean
    heat_target = heat_semigroup_gaussian(suite["heat_h"], cfg.horizon, cfg.initial_measure)
    gates.append(gate_3se("c04_heat_mean", mean_se(res.arrays["heat"]), heat_target,
                          note="E<X_T, h> = <m, S_T h>"))

    # 5. martingale problem
    for j in range(len(suite["mp_phis"])):
        checks = res.arrays[f"mp{j}_checks"]
        for c, t_c in enumerate(suite["mp_checkpoints"]):
            gates.append(gate_3se(f"c05_mp{j}_mean_t{t_c:g}", mean_se(checks[:, c]), 0.0,
                                  note="martingale mean-zero"))
        paired = mean_se(res.arrays[f"mp{j}_mt2"] - res.arrays[f"mp{j}_qv"])
        gates.append(gate_3se(f"c05_mp{j}_qv_gap", paired, 0.0,
                              note="paired E[M(T)^2 - int <X,phi^2> ds]"))

    # 6. isometry battery + finite-N trend
    z = res.arrays["z"]
    icf = res.arrays["icf"]
    q = res.arrays["q"]
    n_basis = z.shape[1]
    for i in range(n_basis):
        lhs = mean_se(icf[:, i] ** 2)
        rhs = mean_se(q[:, i, i])
        gates.append(gate_combined_se(f"c06_iso_{i}", lhs, rhs,
                                      note="closed-form ||I(phi)||^2 vs ||phi||^2"))
    gap_main = mean_se(np.sum(icf ** 2 - z ** 2, axis=1))
    n_base = max(2, cfg.n_quantum // 4)
    r_trend = int(tol.get("trend_replicates", cfg.replicates))
    ctx_trend = base_ctx(cfg, basis=suite["basis"], basis_light=True)
    ctx_trend.update({"n_quantum": n_base, "master_seed": cfg.seed + 3_000_003})
    res_trend = run_stat_ensemble(ctx_trend, r_trend, n_jobs)
    gap_base = mean_se(np.sum(res_trend.arrays["icf"] ** 2 - res_trend.arrays["z"] ** 2,
                              axis=1))
    gates.append(Gate("c06_iso_trend", abs(gap_main.value), gap_main.se,
                      abs(gap_base.value), abs(gap_base.value),
                      bool(abs(gap_main.value) < abs(gap_base.value)), "trend",
                      note=f"paired motion-noise gap, N={n_base} -> {cfg.n_quantum}; "
                           f"base se {gap_base.se:.3g}"))
    summary["trend"] = {"n_base": n_base, "gap_base": gap_base.value,
                        "gap_base_se": gap_base.se, "gap_main": gap_main.value,
                        "gap_main_se": gap_main.se}

    # 7. vertical-derivative exactness probes
    gates.append(_vderiv_probe_gate(cfg, suite["basis"],
                                    int(tol.get("vderiv_probes", 100)),
                                    float(tol.get("vderiv_abs_tol", 1e-10))))

    # 8. pathwise representation refinement
    rep_specs = [s for s in suite["basis"] if "weight" not in s]
    r_rep = int(tol.get("rep_replicates", 100))
    drop = float(tol.get("rep_min_drop", 0.35))
    ctx_rep_base = base_ctx(cfg, rep_integrands=rep_specs)
    ctx_rep_base.update({"n_quantum": n_base, "master_seed": cfg.seed + 4_000_003})
    res_rep_base = run_stat_ensemble(ctx_rep_base, r_rep, n_jobs)
    ctx_rep_fine = base_ctx(cfg, rep_integrands=rep_specs)
    ctx_rep_fine.update({"dt": cfg.dt / 2.0, "master_seed": cfg.seed + 5_000_003})
    res_rep_fine = run_stat_ensemble(ctx_rep_fine, r_rep, n_jobs)
    for j, spec in enumerate(rep_specs):
        med_base = float(np.median(res_rep_base.arrays[f"rep{j}_sup"]))
        med_fine = float(np.median(res_rep_fine.arrays[f"rep{j}_sup"]))
        gates.append(gate_decrease(f"c08_rep_{spec.get('label', j)}", med_fine, med_base,
                                   drop,
                                   note=f"median sup|F - I| over {r_rep} paths, "
                                        f"(N,dt)=({n_base},{cfg.dt:g}) -> "
                                        f"({cfg.n_quantum},{cfg.dt / 2:g})"))
    summary["representation"] = {"n_base": n_base, "r_rep": r_rep}

    # 9 + 10. Galerkin recovery, residual, adjoint and integration by parts
    try:
        samples = BasisSamples(z, q)
        n_used = res.n_used
        half = n_used // 2
        fit_s = BasisSamples(z[:half], q[:half])
        hold_s = BasisSamples(z[half:], q[half:])
        c_plant = suite["planted_coefficients"][:n_basis]
        c_plant += [0.0] * (n_basis - len(c_plant))
        g_all = planted_target(samples, c_plant)
        rel_tol = float(tol.get("relative_residual", 0.05))
        report, solution = _fit_and_check(suite["basis"], fit_s, hold_s,
                                          g_all[:half], g_all[half:], cfg.ridge, c_plant)
        gates.append(Gate("c09_galerkin_chi2", report["chi2"], float("nan"), 0.0,
                          report["chi2_crit"],
                          bool(report["chi2"] <= report["chi2_crit"]), "chi2_95",
                          note=f"coefficients {np.round(report['coefficients'], 4).tolist()} "
                               f"vs planted {c_plant}"))
        gates.append(Gate("c09_galerkin_residual", report["relative_residual"], float("nan"),
                          0.0, rel_tol,
                          bool(report["relative_residual"] <= rel_tol), "rel_residual",
                          note="holdout residual / Var[G]"))
        summary["galerkin"] = report
        # integration by parts on planted pairs
        for i in range(n_basis):
            for j in range(i, n_basis):
                lhs = mean_se(z[:, i] * z[:, j])
                rhs = mean_se(q[:, i, j])
                gates.append(gate_combined_se(f"c10_ibp_{i}{j}", lhs, rhs,
                                              note="E[Y_i(T) Y_j(T)] vs Gram entry"))
        # adjoint identity against fitted derivatives of each planted target
        for j in range(n_basis):
            e_j = [1.0 if i == j else 0.0 for i in range(n_basis)]
            g_j = planted_target(samples, e_j)
            sol_j = fit(build_basis(suite["basis"]), fit_s, g_j[:half], ridge=cfg.ridge)
            for i in range(n_basis):
                rep = check_adjoint(i, g_j[half:], hold_s, sol_j)
                gates.append(gate_combined_se(f"c10_adjoint_{i}{j}", rep.lhs, rep.rhs,
                                              note=f"phi_{i} against fitted Y_{j}"))
    except Exception as exc:  # never crash the battery; surface as a failed gate
        gates.append(Gate("c09_galerkin", float("nan"), float("nan"), 0.0, 0.0, False,
                          "error", note=f"{type(exc).__name__}: {exc}"))

    summary["n_gates"] = len(gates)
    summary["n_passed"] = sum(g.passed for g in gates)
    return gates, summary


def write_gate_outputs(out_dir: Path, gates: list, summary: dict,
                       cfg: ExperimentConfig, wall_clock: float) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    gate_csv = out_dir / "gate_table.csv"
    write_csv(gate_csv, GATE_HEADER, [g.row() for g in gates])
    summary_json = out_dir / "summary.json"
    write_json(summary_json, {"summary": summary,
                              "gates": {g.name: g.passed for g in gates}})
    manifest = RunManifest(config=cfg.to_dict(), replicates_run=cfg.replicates,
                           wall_clock_seconds=wall_clock)
    manifest.artifact_checksums = {p.name: sha256_file(p) for p in (gate_csv, summary_json)}
    manifest.write(out_dir / "manifest.json")
    return {"gate_table": str(gate_csv), "summary": str(summary_json),
            "manifest": str(out_dir / "manifest.json")}


def run(cfg: ExperimentConfig, out_dir=None, n_jobs: int | None = None,
        vderiv_t: float | None = None, vderiv_x=None) -> tuple[int, dict]:
    """Dispatch one configured experiment; returns (exit_code, report)."""
    t_start = time.time()
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    jobs = resolve_jobs(n_jobs if n_jobs is not None else (cfg.threads or None))
    if cfg.experiment == "simulate":
        report = run_simulate(cfg, out, jobs)
        return 0, report
    if cfg.experiment == "verify-mp":
        gates, summary = run_verify_mp(cfg, jobs)
    elif cfg.experiment == "verify-iso":
        gates, summary = run_verify_iso(cfg, jobs)
    elif cfg.experiment == "vderiv":
        if vderiv_t is None or vderiv_x is None:
            raise ConfigError("vderiv needs --t and --x")
        report = run_vderiv(cfg, vderiv_t, vderiv_x, jobs)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "vderiv.json", report)
        return 0, report
    elif cfg.experiment == "represent":
        gates, summary = run_represent(cfg, jobs)
    elif cfg.experiment == "full-suite":
        gates, summary = run_full_suite(cfg, jobs)
    else:
        raise ConfigError(f"experiment: unhandled experiment {cfg.experiment!r}")
    files = write_gate_outputs(out, gates, summary, cfg, time.time() - t_start)
    failed = [g.name for g in gates if not g.passed]
    report = {"gates_total": len(gates), "gates_failed": failed, "files": files,
              "summary": summary}
    return (0 if not failed else 1), report
