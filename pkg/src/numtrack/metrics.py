"""Tracking-error statistics, region membership, outage rates and bounds.

All steady-state averages discard a burn-in prefix (default: the first 10%
of updates, at least 100). Updates whose equilibrium solve failed are
excluded from averages and reported as skipped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .solver import Trajectory

__all__ = [
    "MetricsReport",
    "BoundValues",
    "summarize_run",
    "eae_mse",
    "delta_estimate",
    "region_probability",
    "outage_probability",
    "lipschitz_estimate",
    "bound_values",
]


def _post_burn_in(trajectory: Trajectory, values: np.ndarray,
                  burn_in_fraction: float, burn_in_min: int) -> np.ndarray:
    start = trajectory.burn_in_count(burn_in_fraction, burn_in_min)
    tail = values[start:]
    tail = tail[np.isfinite(tail)]
    if tail.size == 0:
        raise ValueError("no post-burn-in updates to average")
    return tail


def eae_mse(trajectory: Trajectory, burn_in_fraction: float = 0.10,
            burn_in_min: int = 100):
    """Time-averaged distance and squared distance to the moving equilibrium."""
    d = _post_burn_in(trajectory, trajectory.distances,
                      burn_in_fraction, burn_in_min)
    return float(np.mean(d)), float(np.mean(d ** 2))


def delta_estimate(equilibria, max_points: int = 1500) -> float:
    """Max pairwise distance over visited equilibria.

    A lower bound for the diameter over the full state space; large sets are
    deterministically thinned to bound the quadratic pair scan.
    """
    if isinstance(equilibria, dict):
        pts = [equilibria[k] for k in sorted(equilibria)]
    else:
        pts = list(equilibria)
    if len(pts) < 2:
        raise ValueError("need at least two equilibria")
    if len(pts) > max_points:
        stride = int(np.ceil(len(pts) / max_points))
        pts = pts[::stride]
    arr = np.asarray(pts)
    sq = np.sum(arr ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (arr @ arr.T)
    return float(np.sqrt(max(d2.max(), 0.0)))


def region_probability(trajectory: Trajectory, delta: float,
                       burn_in_fraction: float = 0.10,
                       burn_in_min: int = 100) -> float:
    """Fraction of post-burn-in updates inside the union of delta balls.

    Membership is evaluated against the equilibria of the recently visited
    states (recorded during the run), a conservative lower bound on
    membership in the full union.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    d = _post_burn_in(trajectory, trajectory.region_distances,
                      burn_in_fraction, burn_in_min)
    return float(np.mean(d <= delta))


def outage_probability(trajectory: Trajectory, original_budgets: np.ndarray,
                       epsilon: float = 0.0, burn_in_fraction: float = 0.10,
                       burn_in_min: int = 100) -> float:
    """Empirical rate of per-node power-budget violations beyond ``epsilon``.

    The violation is measured against the original budgets even when the
    trajectory was produced with a backed-off instance.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    start = trajectory.burn_in_count(burn_in_fraction, burn_in_min)
    usage = trajectory.power_usage[start:]
    if usage.size == 0:
        raise ValueError("no post-burn-in updates")
    excess = usage - np.asarray(original_budgets)[None, :]
    return float(np.mean(np.max(excess, axis=1) > epsilon))


def lipschitz_estimate(constraint, samples, inflation: float = 1.2):
    """Sampled-pair Lipschitz constant of a scalar constraint function.

    Returns the inflated max difference quotient together with the max
    sampled finite-difference gradient norm as a cross-check.
    """
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or len(pts) < 15:
        raise ValueError("need a 2-D array with enough sample points")
    vals = np.array([constraint(p) for p in pts])
    best = 0.0
    for i in range(len(pts) - 1):
        diff = pts[i + 1:] - pts[i]
        dist = np.linalg.norm(diff, axis=1)
        ok = dist > 1e-12
        if np.any(ok):
            best = max(best, float(np.max(np.abs(vals[i + 1:] - vals[i])[ok] / dist[ok])))
    if best == 0.0 and np.ptp(vals) == 0.0:
        grad_norm = 0.0
        return 0.0, grad_norm
    h = 1e-6
    grad_norm = 0.0
    for p in pts[: min(len(pts), 20)]:
        g = np.array([(constraint(p + h * e) - constraint(p - h * e)) / (2 * h)
                      for e in np.eye(len(p))])
        grad_norm = max(grad_norm, float(np.linalg.norm(g)))
    return inflation * best, grad_norm


@dataclass(frozen=True)
class BoundValues:
    """Closed-form right-hand sides of the steady-state guarantees.

    ``vacuous`` is set when the contraction estimate is not below one; the
    probability bounds then degenerate to one and the error bounds are not
    computed.
    """

    beta_hat: float
    t_bar: float
    n_bar: float
    delta_hat: float
    eae_bound: float | None
    mse_bound: float | None
    region_outside_bound: float
    outage_bound: float | None
    vacuous: bool


def bound_values(beta_hat: float, t_bar: float, n_bar: float, delta_hat: float,
                 c_hat: float | None = None, epsilon: float | None = None,
                 margin: float | None = None) -> BoundValues:
    """Evaluate the analytical bound expressions.

    EAE: ``T*delta*beta / ((1-beta)*N)``;
    MSE: ``delta^2*beta^2*(2*beta + T*(1-beta)*N) / ((1-beta^2)*(1-beta)*N^2)``;
    out-of-region probability: ``min(1, beta*T/((1-beta)*N))``;
    constraint outage: ``min(1, c*delta*beta*T/((eps+K)*(1-beta)*N))``.
    """
    if n_bar <= 0 or t_bar <= 0:
        raise ValueError("t_bar and n_bar must be positive")
    if beta_hat < 0 or delta_hat < 0:
        raise ValueError("beta_hat and delta_hat must be nonnegative")
    outage = None
    if beta_hat >= 1.0:
        if c_hat is not None:
            outage = 1.0
        return BoundValues(beta_hat, t_bar, n_bar, delta_hat,
                           eae_bound=None, mse_bound=None,
                           region_outside_bound=1.0, outage_bound=outage,
                           vacuous=True)
    b, T, N, d = beta_hat, t_bar, n_bar, delta_hat
    eae = T * d * b / ((1.0 - b) * N)
    mse = d ** 2 * b ** 2 * (2.0 * b + T * (1.0 - b) * N) / (
        (1.0 - b ** 2) * (1.0 - b) * N ** 2)
    region = min(1.0, b * T / ((1.0 - b) * N))
    if c_hat is not None:
        denom = (0.0 if epsilon is None else epsilon) + (0.0 if margin is None else margin)
        if denom <= 0.0:
            outage = 1.0
        else:
            outage = min(1.0, c_hat * d * b * T / (denom * (1.0 - b) * N))
    return BoundValues(b, T, N, d, eae, mse, region, outage, vacuous=False)


@dataclass
class MetricsReport:
    """Aggregated per-run tracking statistics and matching bounds."""

    eae: float
    mse: float
    region_prob_in: float
    beta_hat: float
    delta_hat: float
    n_bar_slots: float
    t_bar: int
    outage: dict
    bounds: BoundValues
    skipped_updates: int = 0

    def __post_init__(self):
        # Jensen: mean of squares dominates squared mean
        if self.mse < self.eae ** 2 - 1e-12:
            raise ValueError("inconsistent report: mse < eae^2")
        if not 0.0 <= self.region_prob_in <= 1.0:
            raise ValueError("region probability out of range")

    def to_json(self) -> str:
        payload = asdict(self)
        payload["outage"] = {str(k): v for k, v in self.outage.items()}
        return json.dumps(payload, sort_keys=True, indent=2)


def summarize_run(trajectory: Trajectory, beta_hat: float, n_bar_slots: float,
                  delta_inflation: float = 1.5, original_budgets=None,
                  outage_epsilon: float = 0.0, c_hat: float | None = None,
                  burn_in_fraction: float = 0.10) -> MetricsReport:
    """Assemble the per-run report from a trajectory and a contraction estimate."""
    eae, mse = eae_mse(trajectory, burn_in_fraction)
    delta_hat = (delta_estimate(trajectory.equilibria)
                 if len(trajectory.equilibria) > 1 else 0.0)
    p_in = region_probability(trajectory, delta_inflation * delta_hat,
                              burn_in_fraction)
    outage = {}
    if original_budgets is not None:
        outage[outage_epsilon] = outage_probability(
            trajectory, original_budgets, outage_epsilon, burn_in_fraction)
    bounds = bound_values(beta_hat, trajectory.update_period, n_bar_slots,
                          delta_inflation * delta_hat, c_hat=c_hat,
                          epsilon=outage_epsilon if c_hat is not None else None,
                          margin=0.0 if c_hat is not None else None)
    return MetricsReport(eae=eae, mse=mse, region_prob_in=p_in,
                         beta_hat=beta_hat, delta_hat=delta_hat,
                         n_bar_slots=n_bar_slots,
                         t_bar=trajectory.update_period, outage=outage,
                         bounds=bounds,
                         skipped_updates=trajectory.skipped_updates)
