"""Experiment orchestration: seeded grids, figure/table data files, manifest.

Grid points are grouped by seed so that every (policy, update-period) run of
one seed shares a single equilibrium cache and per-state scaling cache; the
channel realization of a seed is identical across policies and update
periods by construction. Workers are pure functions of the resolved scenario,
so parallel and serial execution produce identical output files.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import fsmc, metrics
from .scenario import (Scenario, epsilon_for_mean_sojourn, make_instance,
                       make_policy, make_process)
from .solver import (EquilibriumSolver, SolverConfig, compute_scaling,
                     contraction_modulus, default_grouping,
                     measured_contraction, probe_shrink, run_tracking)

__all__ = ["run_scenario", "SUBCOMMANDS"]

SUBCOMMANDS = ("validate", "fig4", "fig5", "fig6", "fig7", "fig8", "table1", "all")

_ABORT_FAILURE_FRACTION = 0.01


def _policy_name(entry) -> str:
    return entry if isinstance(entry, str) else entry["kind"]


def _policy_label(entry) -> str:
    return {"constant": "con_pdua", "diagonal_hessian": "dia_pdua",
            "block_adaptive": "pdsga_adaptive", "brute_force": "bru_pdua"}[
                _policy_name(entry)]


def _write_csv(path: Path, header_comment: str, columns, rows) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header_comment}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _beta_samples(problem, solver, policy, grouping, sample_states,
                  scaling_cache):
    """Measured contraction factor per sampled state, at the equilibrium."""
    rates = []
    for state in sample_states:
        y_eq = solver.cache.get(state.state_index)
        if y_eq is None:
            y_eq = solver.solve(state)
        key = state.state_index
        scal = scaling_cache.get(key)
        if scal is None:
            scal = compute_scaling(policy, problem, y_eq, state, grouping)
            scaling_cache[key] = scal
        rates.append(measured_contraction(problem, scal, y_eq, state,
                                          updates=policy.probe_updates,
                                          window=policy.probe_window))
    return rates


def _distinct_states(trajectory, process, limit):
    seen, out = set(), []
    for sid in trajectory.state_ids:
        if sid not in seen:
            seen.add(sid)
            out.append(process.state_at(sid))
            if len(out) >= limit:
                break
    return out


# ---------------------------------------------------------------------------
# per-seed workers (top level for pickling)

def _seed_grid_worker(args):
    """All (policy, update period) runs of one seed for the Tbar sweep."""
    data, seed, horizon = args
    scenario = Scenario(data=data)
    problem = make_instance(scenario)
    grouping = default_grouping(problem)
    solver = EquilibriumSolver(problem, float(data["equilibrium_tolerance"]))
    eps = float(data["fsmc"]["sweep_epsilon"])
    burn = float(data["burn_in_fraction"])
    rows = []
    caches = {}
    for entry in data["policies"]:
        policy = make_policy(entry)
        scaling_cache = caches.setdefault(_policy_name(entry), {})
        sample_states = None
        for t_bar in data["update_periods"]:
            process = make_process(scenario, seed, epsilon=eps)
            config = SolverConfig(update_period=int(t_bar), horizon=int(horizon),
                                  equilibrium_tolerance=float(data["equilibrium_tolerance"]),
                                  burn_in_fraction=burn)
            traj = run_tracking(problem, process, policy, config, solver=solver,
                                scaling_cache=scaling_cache
                                if policy.kind in ("block_adaptive", "brute_force")
                                else None)
            eae, mse = metrics.eae_mse(traj, burn)
            delta_hat = (metrics.delta_estimate(traj.equilibria)
                         if len(traj.equilibria) > 1 else 0.0)
            delta = float(data["delta_inflation"]) * delta_hat
            p_in = metrics.region_probability(traj, delta, burn)
            if sample_states is None:
                sample_states = _distinct_states(traj, process, 12)
            beta = _beta_samples(problem, solver, policy, grouping,
                                 sample_states, scaling_cache)
            rows.append({
                "policy": _policy_label(entry),
                "t_bar": int(t_bar),
                "seed": int(seed),
                "eae": eae,
                "mse": mse,
                "out_freq": 1.0 - p_in,
                "delta_hat": delta_hat,
                "beta_hat_worst": float(np.max(beta)),
                "beta_hat_avg": float(np.mean(beta)),
                "updates": int(traj.num_updates),
                "skipped": int(traj.skipped_updates),
            })
    return rows


def _fig8_worker(args):
    """(sojourn ratio, margin) grid of one seed with the adaptive policy."""
    data, seed, horizon = args
    scenario = Scenario(data=data)
    burn = float(data["burn_in_fraction"])
    base_budgets = None
    rows = []
    policy = make_policy({"kind": "block_adaptive", "probe_updates": 90,
                          "probe_window": 40})
    num_chains = None
    solvers = {}
    caches = {}
    for ratio in data["sojourn_ratios"]:
        for margin in data["margins"]:
            problem = make_instance(scenario, margin=float(margin))
            if base_budgets is None:
                original = make_instance(scenario)
                base_budgets = original._p_max
                num_chains = len(original.pc_keys)
            solver = solvers.get(margin)
            if solver is None:
                solver = EquilibriumSolver(problem,
                                           float(data["equilibrium_tolerance"]))
                solvers[margin] = solver
            eps = epsilon_for_mean_sojourn(1.0 / float(ratio), num_chains)
            process = make_process(scenario, seed, epsilon=eps)
            config = SolverConfig(update_period=1, horizon=int(horizon),
                                  equilibrium_tolerance=float(data["equilibrium_tolerance"]),
                                  burn_in_fraction=burn)
            cache = caches.setdefault(margin, {})
            traj = run_tracking(problem, process, policy, config, solver=solver,
                                scaling_cache=cache)
            eae, mse = metrics.eae_mse(traj, burn)
            outage = metrics.outage_probability(
                traj, base_budgets, epsilon=float(data["outage_epsilon"]),
                burn_in_fraction=burn)
            delta_hat = (metrics.delta_estimate(traj.equilibria)
                         if len(traj.equilibria) > 1 else 0.0)
            grouping = default_grouping(problem)
            sample_states = _distinct_states(traj, process, 8)
            beta = _beta_samples(problem, solver, policy, grouping,
                                 sample_states, cache)
            rows.append({
                "ratio": float(ratio),
                "margin": float(margin),
                "seed": int(seed),
                "outage": outage,
                "mse": mse,
                "eae": eae,
                "delta_hat": delta_hat,
                "beta_hat_worst": float(np.max(beta)),
                "updates": int(traj.num_updates),
                "skipped": int(traj.skipped_updates),
            })
    return rows


def _fig4_worker(args):
    data, seed, horizon = args
    scenario = Scenario(data=data)
    problem = make_instance(scenario)
    solver = EquilibriumSolver(problem, float(data["equilibrium_tolerance"]))
    t_bar = int(data["update_period"])
    traces = {}
    for entry in data["policies"]:
        policy = make_policy(entry)
        process = make_process(scenario, seed)
        config = SolverConfig(update_period=t_bar, horizon=int(horizon),
                              equilibrium_tolerance=float(data["equilibrium_tolerance"]))
        traj = run_tracking(problem, process, policy, config, solver=solver,
                            scaling_cache={})
        per_slot = np.repeat(traj.utilities, t_bar)[:int(horizon)]
        peak = per_slot.max()
        traces[_policy_label(entry)] = per_slot / peak if peak > 0 else per_slot
    return traces


# ---------------------------------------------------------------------------
# aggregation and file emission

def _aggregate(rows, keys, fields):
    """Mean and 95% normal CI half-width of fields across seeds."""
    grouped = {}
    for row in rows:
        grouped.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key in sorted(grouped, key=lambda t: tuple(str(x) for x in t)):
        bucket = grouped[key]
        agg = dict(zip(keys, key))
        agg["num_seeds"] = len(bucket)
        for f in fields:
            vals = np.array([b[f] for b in bucket], dtype=float)
            agg[f"{f}_mean"] = float(np.mean(vals))
            agg[f"{f}_ci95"] = float(1.96 * np.std(vals, ddof=1) / np.sqrt(len(vals))
                                     if len(vals) > 1 else 0.0)
            agg[f"{f}_max"] = float(np.max(vals))
        out.append(agg)
    return out


def _check_failures(rows):
    skipped = sum(r["skipped"] for r in rows)
    updates = sum(r["updates"] for r in rows)
    if updates and skipped / updates > _ABORT_FAILURE_FRACTION:
        raise RuntimeError(
            f"equilibrium failures above threshold: {skipped}/{updates} updates")


def _pool_map(worker, payloads, jobs):
    if jobs <= 1 or len(payloads) <= 1:
        return [worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, payloads))


def _policy_order(data):
    return [_policy_label(p) for p in data["policies"]]


def _grid_rows(scenario: Scenario, jobs: int, horizon: int, cache: dict):
    if "grid_rows" not in cache:
        payloads = [(scenario.data, seed, horizon) for seed in scenario.seeds]
        results = _pool_map(_seed_grid_worker, payloads, jobs)
        rows = [row for chunk in results for row in chunk]
        _check_failures(rows)
        cache["grid_rows"] = rows
    return cache["grid_rows"]


def _n_bar_slots(scenario: Scenario) -> float:
    process = make_process(scenario, scenario.seeds[0],
                           epsilon=float(scenario.fsmc["sweep_epsilon"]))
    return fsmc.mean_sojourn_slots(process)


def _emit_fig5(scenario, rows, out_dir: Path) -> Path:
    n_bar = _n_bar_slots(scenario)
    agg = _aggregate(rows, ("policy", "t_bar"),
                     ("out_freq", "beta_hat_worst", "delta_hat"))
    order = {name: i for i, name in enumerate(_policy_order(scenario.data))}
    agg.sort(key=lambda r: (order[r["policy"]], r["t_bar"]))
    out_rows = []
    for r in agg:
        beta = r["beta_hat_worst_max"]
        bound = (min(1.0, beta * r["t_bar"] / ((1.0 - beta) * n_bar))
                 if beta < 1.0 else 1.0)
        out_rows.append((r["policy"], r["t_bar"], r["t_bar"] / n_bar,
                         r["out_freq_mean"], r["out_freq_ci95"], bound,
                         beta, r["num_seeds"]))
    return _write_csv(
        out_dir / "fig5_region_stability.csv",
        f"config_hash={scenario.hash} n_bar_slots={n_bar!r}",
        ("policy", "t_bar", "t_over_n", "out_of_region_freq_mean",
         "out_of_region_freq_ci95", "theoretical_bound", "beta_hat_worst",
         "num_seeds"),
        out_rows)


def _emit_fig67(scenario, rows, out_dir: Path, which: str) -> Path:
    n_bar = _n_bar_slots(scenario)
    field = "eae" if which == "fig6" else "mse"
    agg = _aggregate(rows, ("policy", "t_bar"),
                     (field, "beta_hat_worst", "delta_hat"))
    order = {name: i for i, name in enumerate(_policy_order(scenario.data))}
    agg.sort(key=lambda r: (order[r["policy"]], r["t_bar"]))
    peak = max(r[f"{field}_mean"] for r in agg)
    out_rows = []
    for r in agg:
        beta = r["beta_hat_worst_max"]
        delta = float(scenario.delta_inflation) * r["delta_hat_max"]
        bv = metrics.bound_values(beta, r["t_bar"], n_bar, delta)
        bound = (bv.eae_bound if which == "fig6" else bv.mse_bound)
        out_rows.append((r["policy"], r["t_bar"], r["t_bar"] / n_bar,
                         r[f"{field}_mean"], r[f"{field}_ci95"],
                         r[f"{field}_mean"] / peak,
                         bound if bound is not None else "",
                         beta, r["num_seeds"]))
    name = "fig6_eae.csv" if which == "fig6" else "fig7_mse.csv"
    return _write_csv(
        out_dir / name,
        f"config_hash={scenario.hash} n_bar_slots={n_bar!r}",
        ("policy", "t_bar", "t_over_n", f"{field}_mean", f"{field}_ci95",
         f"{field}_normalized", f"{field}_bound", "beta_hat_worst", "num_seeds"),
        out_rows)


def _emit_fig8(scenario, out_dir: Path, jobs: int, horizon: int) -> Path:
    payloads = [(scenario.data, seed, horizon) for seed in scenario.seeds]
    results = _pool_map(_fig8_worker, payloads, jobs)
    rows = [row for chunk in results for row in chunk]
    _check_failures(rows)

    # Lipschitz constant of the per-node power constraint via sampled pairs
    problem = make_instance(scenario)
    lay = problem.layout
    node = problem.power_nodes[0]
    col = problem.power_nodes.index(node)

    def power_gap(x):
        return float(problem._t_p[:, col] @ x[lay.P]) - problem._p_max[col]

    rng = np.random.default_rng(7)
    samples = np.abs(rng.normal(0.3, 0.3, size=(120, lay.dim)))
    c_hat, _grad = metrics.lipschitz_estimate(power_gap, samples)

    agg = _aggregate(rows, ("ratio", "margin"),
                     ("outage", "mse", "delta_hat", "beta_hat_worst"))
    agg.sort(key=lambda r: (r["ratio"], r["margin"]))
    out_rows = []
    eps = float(scenario.outage_epsilon)
    for r in agg:
        beta = r["beta_hat_worst_max"]
        delta = float(scenario.delta_inflation) * r["delta_hat_max"]
        bv = metrics.bound_values(beta, 1.0, 1.0 / r["ratio"], delta,
                                  c_hat=c_hat, epsilon=eps, margin=r["margin"])
        out_rows.append((r["ratio"], r["margin"], r["outage_mean"],
                         r["outage_ci95"], bv.outage_bound, r["mse_mean"],
                         beta, c_hat, r["num_seeds"]))
    return _write_csv(
        out_dir / "fig8_outage_tradeoff.csv",
        f"config_hash={scenario.hash} policy=pdsga_adaptive outage_epsilon={eps!r}",
        ("t_over_n", "margin", "outage_mean", "outage_ci95", "outage_bound",
         "mse_mean", "beta_hat_worst", "lipschitz_c_hat", "num_seeds"),
        out_rows)


def _emit_fig4(scenario, out_dir: Path, horizon: int) -> Path:
    traces = _fig4_worker((scenario.data, scenario.seeds[0], horizon))
    names = _policy_order(scenario.data)
    rows = [(t, *(traces[n][t] for n in names)) for t in range(horizon)]
    return _write_csv(
        out_dir / "fig4_utility_tracking.csv",
        f"config_hash={scenario.hash} t_bar={scenario.update_period} "
        f"seed={scenario.seeds[0]}",
        ("slot", *names), rows)


def _emit_table1(scenario, out_dir: Path) -> Path:
    problem = make_instance(scenario)
    grouping = default_grouping(problem)
    solver = EquilibriumSolver(problem, float(scenario.equilibrium_tolerance))
    process = make_process(scenario, scenario.seeds[0])
    states, seen = [], set()
    guard = 0
    while len(states) < int(scenario.table1_states) and guard < 10 ** 6:
        state = process.step()
        guard += 1
        if state.state_index not in seen:
            seen.add(state.state_index)
            states.append(state)
    rows = []
    recovery_updates = 600
    for entry in scenario.policies:
        policy = make_policy(entry)
        if policy.kind == "brute_force" and isinstance(entry, str):
            policy = make_policy({"kind": "brute_force", "refine_evals": 200})
        cache = {}
        beta = []
        for state in states:
            y_eq = solver.solve(state)
            scal = cache.get(state.state_index)
            if scal is None:
                scal = compute_scaling(policy, problem, y_eq, state, grouping)
                cache[state.state_index] = scal
            shrink = probe_shrink(problem, scal, y_eq, state,
                                  updates=recovery_updates)
            beta.append(min(shrink, 1e6) ** (1.0 / recovery_updates))
        norms = [contraction_modulus(problem, cache[s.state_index],
                                     solver.cache[s.state_index], s)
                 for s in states]
        rows.append((_policy_label(entry), float(np.mean(beta)),
                     float(np.max(beta)), float(np.mean(norms)),
                     float(np.max(norms)), len(states)))
    return _write_csv(
        out_dir / "table1_contraction.csv",
        f"config_hash={scenario.hash} states={len(states)} "
        "beta=per-update factor of the standardized recovery run; "
        "modulus=spectral-norm reference",
        ("policy", "beta_avg", "beta_worst", "modulus_norm_avg",
         "modulus_norm_worst", "num_states"),
        rows)


def run_scenario(scenario: Scenario, subcommand: str, out_dir,
                 seeds=None, jobs: int = 1, horizon: int | None = None):
    """Run one subcommand and return the list of written files."""
    if subcommand not in SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    data = json.loads(json.dumps(scenario.data))
    if seeds is not None:
        data["seeds"] = [int(s) for s in seeds]
    if horizon is not None:
        data["horizon"] = int(horizon)
    scenario = Scenario(data=data)
    out_dir = Path(os.environ.get("NUMTRACK_OUT", out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    written = []
    cache: dict = {}
    run_horizon = int(scenario.horizon)

    if subcommand in ("fig4", "all"):
        written.append(_emit_fig4(scenario, out_dir, int(scenario.fig4_horizon)))
    if subcommand in ("fig5", "fig6", "fig7", "all"):
        rows = _grid_rows(scenario, jobs, run_horizon, cache)
        if subcommand in ("fig5", "all"):
            written.append(_emit_fig5(scenario, rows, out_dir))
        if subcommand in ("fig6", "all"):
            written.append(_emit_fig67(scenario, rows, out_dir, "fig6"))
        if subcommand in ("fig7", "all"):
            written.append(_emit_fig67(scenario, rows, out_dir, "fig7"))
    if subcommand in ("fig8", "all"):
        fig8_horizon = min(run_horizon, int(scenario.fig8_horizon))
        written.append(_emit_fig8(scenario, out_dir, jobs, fig8_horizon))
    if subcommand in ("table1", "all"):
        written.append(_emit_table1(scenario, out_dir))

    manifest = {
        "config_hash": scenario.hash,
        "subcommand": subcommand,
        "scenario": scenario.data,
        "outputs": [str(p) for p in written],
        "wall_clock_s": time.time() - t0,
        "grid": {
            "policies": _policy_order(scenario.data),
            "update_periods": list(scenario.update_periods),
            "seeds": list(scenario.seeds),
            "sojourn_ratios": list(scenario.sojourn_ratios),
            "margins": list(scenario.margins),
        },
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return written
