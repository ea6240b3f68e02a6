"""Scenario files: experiment configuration, validation and builders.

A scenario is a YAML mapping with the keys below (defaults in parentheses):

```yaml
name: default                  # free-form label
topology: fig1                 # preset name, or an explicit table:
#   topology:
#     num_nodes: 6
#     links: [[1, 2], [2, 3], ...]        # [tx, rx] per link id 1..L
#     routes:                              # one row per commodity
#       - {source: 1, stream: 1, links: [3, 7, 8], destination: 6}
num_subbands: 2
utility_weight: 5.0            # scalar or list per commodity
power_budget: 1.0              # per transmitting node
snr_db: 10.0                   # sets the noise power via the reference power
aux_concavity: 0.5             # strict-concavity term on powers/aux rates
fsmc:
  num_states: 3                # levels per (link, subband) chain
  epsilon: 0.05                # neighbour-hop probability (fig4 / table1)
  sweep_epsilon: 2.0e-5        # hop probability for the Tbar sweeps
update_period: 4               # Tbar for fig4
update_periods: [1, 2, 4, 8, 16]   # Tbar grid for fig5/6/7
sojourn_ratios: [0.05, 0.2, 0.8]   # Tbar/Nbar targets for fig8
margins: [0.0, 0.05, 0.1, 0.2]     # power backoff grid for fig8
outage_epsilon: 0.0
policies: [constant, diagonal_hessian, block_adaptive, brute_force]
horizon: 200000
fig8_horizon: 4000
fig4_horizon: 4000
seeds: [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
table1_states: 40
delta_inflation: 1.5
burn_in_fraction: 0.1
equilibrium_tolerance: 1.0e-6
```
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import yaml

from . import network
from .fsmc import ChannelProcess, build_channel_process, build_link_chain
from .problem import ProblemInstance
from .solver import ScalingPolicy

__all__ = [
    "Scenario",
    "ScenarioError",
    "load_scenario",
    "validate_scenario",
    "default_scenario",
    "make_instance",
    "make_process",
    "make_policy",
    "epsilon_for_mean_sojourn",
    "config_hash",
]


class ScenarioError(ValueError):
    """Scenario validation failure with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


_DEFAULTS = {
    "name": "default",
    "topology": "fig1",
    "num_subbands": 2,
    "utility_weight": 5.0,
    "power_budget": 1.0,
    "snr_db": 10.0,
    "aux_concavity": 0.5,
    "fsmc": {"num_states": 3, "epsilon": 0.05, "sweep_epsilon": 2e-5},
    "update_period": 4,
    "update_periods": [1, 2, 4, 8, 16],
    "sojourn_ratios": [0.05, 0.2, 0.8],
    "margins": [0.0, 0.05, 0.1, 0.2],
    "outage_epsilon": 0.0,
    "policies": ["constant", "diagonal_hessian", "block_adaptive", "brute_force"],
    "horizon": 200_000,
    "fig8_horizon": 4000,
    "fig4_horizon": 4000,
    "seeds": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
    "table1_states": 40,
    "delta_inflation": 1.5,
    "burn_in_fraction": 0.1,
    "equilibrium_tolerance": 1e-6,
}

_POLICY_NAMES = ("constant", "diagonal_hessian", "block_adaptive", "brute_force")


@dataclass(frozen=True)
class Scenario:
    """Resolved, validated experiment configuration."""

    data: dict

    def __getattr__(self, key):
        try:
            return self.data[key]
        except KeyError as exc:
            raise AttributeError(key) from exc

    @property
    def hash(self) -> str:
        return config_hash(self.data)


def config_hash(data: dict) -> str:
    """Stable hash of the resolved configuration (field order independent)."""
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def default_scenario(**overrides) -> Scenario:
    data = json.loads(json.dumps(_DEFAULTS))  # deep copy with plain types
    for key, value in overrides.items():
        if key == "fsmc":
            data["fsmc"].update(value)
        else:
            data[key] = value
    return _validate(data)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ScenarioError("E_PARSE", f"invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("E_PARSE", "scenario must be a mapping")
    unknown = set(raw) - set(_DEFAULTS)
    if unknown:
        raise ScenarioError("E_KEY", f"unknown keys: {sorted(unknown)}")
    data = json.loads(json.dumps(_DEFAULTS))
    for key, value in raw.items():
        if key == "fsmc" and isinstance(value, dict):
            data["fsmc"].update(value)
        else:
            data[key] = value
    return _validate(data)


def _validate(data: dict) -> Scenario:
    fsmc = data["fsmc"]
    for key in ("epsilon", "sweep_epsilon"):
        if not 0.0 < float(fsmc[key]) <= 0.5:
            raise ScenarioError("E_EPS_RANGE", f"fsmc.{key} must lie in (0, 1/2]")
    if int(fsmc["num_states"]) < 3:
        raise ScenarioError("E_FSMC_STATES", "fsmc.num_states must be >= 3")
    for key in ("update_periods", "sojourn_ratios", "margins", "seeds", "policies"):
        if not data[key]:
            raise ScenarioError("E_EMPTY_GRID", f"{key} must be nonempty")
    if len(set(data["seeds"])) != len(data["seeds"]):
        raise ScenarioError("E_SEEDS", "seeds must be distinct")
    if int(data["update_period"]) < 1 or any(int(t) < 1 for t in data["update_periods"]):
        raise ScenarioError("E_TBAR", "update periods must be >= 1")
    for p in data["policies"]:
        name = p["kind"] if isinstance(p, dict) else p
        if name not in _POLICY_NAMES:
            raise ScenarioError("E_POLICY", f"unknown policy {name!r}")
    if any(float(m) < 0 for m in data["margins"]):
        raise ScenarioError("E_MARGIN", "margins must be nonnegative")
    if float(data["outage_epsilon"]) < 0:
        raise ScenarioError("E_EPSILON", "outage_epsilon must be nonnegative")
    if int(data["horizon"]) < 1000:
        raise ScenarioError("E_HORIZON", "horizon must be >= 1000 slots")
    if float(data["snr_db"]) < -20 or float(data["snr_db"]) > 60:
        raise ScenarioError("E_SNR", "snr_db out of the supported range")
    if float(data["aux_concavity"]) < 0:
        raise ScenarioError("E_AUX", "aux_concavity must be nonnegative")
    # topology resolution probes the full construction
    topo, routing = _build_topology(data)
    _slater_probe(data, topo, routing)
    return Scenario(data=data)


def _build_topology(data: dict):
    spec = data["topology"]
    nf = int(data["num_subbands"])
    if spec == "fig1":
        return network.builtin_figure1(num_subbands=nf)
    if not isinstance(spec, dict):
        raise ScenarioError("E_TOPO", "topology must be 'fig1' or a mapping")
    try:
        topo = network.build_topology(int(spec["num_nodes"]),
                                      [tuple(e) for e in spec["links"]], nf)
        membership = {l: set() for l in topo.link_ids}
        destinations = {}
        commodities = []
        for row in spec["routes"]:
            commodity = (int(row["source"]), int(row["stream"]))
            commodities.append(commodity)
            destinations[commodity] = int(row["destination"])
            for l in row["links"]:
                membership[int(l)].add(commodity)
        routing = network.RoutingTable(
            commodities=tuple(sorted(commodities)),
            link_membership={l: frozenset(m) for l, m in membership.items()},
            destinations=destinations)
        routing.validate(topo)
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError("E_TOPO_PARTITION", str(exc)) from exc
    return topo, routing


def _noise_power(data: dict, topo) -> float:
    """Reference-power SNR rule: sigma^2 = P_ref / SNR_linear.

    P_ref spreads a node budget uniformly over its links and subbands,
    averaged over transmitting nodes.
    """
    sizes = [len(topo.outgoing_sets[k]) for k in range(1, topo.num_nodes + 1)
             if topo.outgoing_sets[k]]
    p_ref = float(data["power_budget"]) / (topo.num_subbands * float(np.mean(sizes)))
    return p_ref / 10.0 ** (float(data["snr_db"]) / 10.0)


def make_instance(scenario: Scenario, margin: float = 0.0) -> ProblemInstance:
    """Build the optimization instance, optionally backing off power budgets."""
    data = scenario.data
    topo, routing = _build_topology(data)
    weight = data["utility_weight"]
    n_r = len(routing.commodities)
    weights = (np.full(n_r, float(weight)) if np.isscalar(weight)
               else np.asarray(weight, dtype=float))
    budget = float(data["power_budget"]) - float(margin)
    if budget <= 0:
        raise ScenarioError("E_MARGIN", "margin exhausts the power budget")
    budgets = {k: budget for k in range(1, topo.num_nodes + 1)
               if topo.outgoing_sets[k]}
    return ProblemInstance(topo, routing, utility_weights=weights,
                           power_budgets=budgets,
                           noise_power=_noise_power(data, topo),
                           aux_concavity=float(data["aux_concavity"]))


def make_process(scenario: Scenario, seed: int,
                 epsilon: float | None = None) -> ChannelProcess:
    """One ring chain per (link, subband); deterministic for a given seed."""
    data = scenario.data
    topo, _ = _build_topology(data)
    keys = [(l, n) for l in topo.link_ids
            for n in range(1, topo.num_subbands + 1)]
    eps = float(data["fsmc"]["epsilon"]) if epsilon is None else float(epsilon)
    return build_channel_process(keys, int(data["fsmc"]["num_states"]), eps,
                                 rng_seed=int(seed))


def make_policy(entry) -> ScalingPolicy:
    """Policy from a scenario entry: a name or a mapping with overrides."""
    if isinstance(entry, str):
        name, kw = entry, {}
    else:
        kw = dict(entry)
        name = kw.pop("kind")
    if name == "constant":
        return ScalingPolicy.constant(**kw)
    if name == "diagonal_hessian":
        return ScalingPolicy.diagonal(**kw)
    if name == "block_adaptive":
        return ScalingPolicy.block_adaptive(**kw)
    if name == "brute_force":
        kw.setdefault("refine_evals", 0)  # refinement reserved for table1
        return ScalingPolicy.brute_force(**kw)
    raise ScenarioError("E_POLICY", f"unknown policy {name!r}")


def epsilon_for_mean_sojourn(n_bar_slots: float, num_chains: int) -> float:
    """Hop probability giving the aggregate state a target mean sojourn."""
    if n_bar_slots <= 1.0:
        raise ValueError("mean sojourn must exceed one slot")
    p_stay = 1.0 - 1.0 / n_bar_slots
    nu = p_stay ** (1.0 / num_chains)
    eps = (1.0 - nu) / 2.0
    if not 0.0 < eps <= 0.5:
        raise ValueError("target sojourn not reachable with a valid epsilon")
    return eps


def _slater_probe(data: dict, topo, routing) -> None:
    """Strict feasibility at a small interior point (zero rates)."""
    weights = np.ones(len(routing.commodities))
    budgets = {k: float(data["power_budget"])
               for k in range(1, topo.num_nodes + 1) if topo.outgoing_sets[k]}
    prob = ProblemInstance(topo, routing, utility_weights=weights,
                           power_budgets=budgets,
                           noise_power=_noise_power(data, topo))
    y = prob.zeros().y.copy()
    y[prob.layout.P] = 0.1 * float(data["power_budget"]) / (
        topo.num_subbands * max(len(topo.outgoing_sets[k]) or 1
                                for k in range(1, topo.num_nodes + 1)))
    y[prob.layout.c] = 1e-4
    keys = [(l, n) for l in topo.link_ids for n in range(1, topo.num_subbands + 1)]
    chain = build_link_chain(int(data["fsmc"]["num_states"]),
                             float(data["fsmc"]["epsilon"]))
    gains_low = ChannelProcess([chain] * len(keys), keys, rng_seed=0).current
    slack = prob.constraint_slacks(y, gains_low)
    if np.any(slack <= 0):
        raise ScenarioError("E_SLATER", "no strictly feasible interior point found")


def validate_scenario(path) -> tuple:
    """Full structural validation without running simulations.

    Returns (scenario, diagnostics). Raises :class:`ScenarioError` on the
    first violated invariant.
    """
    scenario = load_scenario(path)
    topo, routing = _build_topology(scenario.data)
    counts = network.constraint_count(topo, routing)
    diagnostics = {
        "config_hash": scenario.hash,
        "num_nodes": topo.num_nodes,
        "num_links": topo.num_links,
        "num_subbands": topo.num_subbands,
        "num_commodities": len(routing.commodities),
        "constraint_count_literal": counts.literal,
        "constraint_count_per_subband": counts.per_subband,
        "noise_power": _noise_power(scenario.data, topo),
    }
    return scenario, diagnostics
