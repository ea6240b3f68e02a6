"""Rate/power/flow optimization instance: Lagrangian, gradients, Jacobian.

The decision vector stacks commodity rates ``r``, per-(link, subband)
transmit powers ``P`` and auxiliary link rates ``c``; the multiplier vector
stacks flow prices (one per link), power prices (one per node that owns at
least one link) and capacity-region prices (one per receiver/subband/subset).
Everything operates on a flat coordinate vector ``y`` whose fixed ordering
is documented by :class:`Layout`.

Sign conventions: every constraint is stored as a slack ``g_i(x) >= 0``
(positive means strictly satisfied) and the Lagrangian is
``sum(utilities) + lambda . slack``. The fictitious gradient stacks the true
primal gradient with the negated dual gradient, so a projected ascent step
on the full vector drives both sides toward the saddle point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fsmc import GlobalChannelState
from .network import RoutingTable, Topology, enumerate_capacity_constraints

__all__ = ["Layout", "PrimalDualPoint", "ProblemInstance"]


@dataclass(frozen=True)
class Layout:
    """Index map between structured blocks and the flat vector.

    Block order (each block internally sorted):

    - ``r``: commodities by (source node, stream index)
    - ``P``: powers by (link id, subband)
    - ``c``: auxiliary rates by (link id, subband)
    - ``lam_r``: flow prices by link id
    - ``lam_P``: power prices by owning node id (nodes with outgoing links)
    - ``lam_mud``: capacity prices by (rx node, subband, subset bitmask)
    """

    r: slice
    P: slice
    c: slice
    lam_r: slice
    lam_P: slice
    lam_mud: slice
    labels: tuple

    @property
    def dim(self) -> int:
        return len(self.labels)

    @property
    def primal(self) -> slice:
        return slice(self.r.start, self.c.stop)

    @property
    def dual(self) -> slice:
        return slice(self.lam_r.start, self.lam_mud.stop)


@dataclass
class PrimalDualPoint:
    """Structured view over a flat iterate ``y``.

    The block properties are numpy views, so mutating them mutates ``y``
    and flat/structured round-trips are exact.
    """

    problem: "ProblemInstance"
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape != (self.problem.layout.dim,):
            raise ValueError("flat vector has wrong dimension")

    @property
    def r(self) -> np.ndarray:
        return self.y[self.problem.layout.r]

    @property
    def P(self) -> np.ndarray:
        return self.y[self.problem.layout.P]

    @property
    def c(self) -> np.ndarray:
        return self.y[self.problem.layout.c]

    @property
    def lam_r(self) -> np.ndarray:
        return self.y[self.problem.layout.lam_r]

    @property
    def lam_P(self) -> np.ndarray:
        return self.y[self.problem.layout.lam_P]

    @property
    def lam_mud(self) -> np.ndarray:
        return self.y[self.problem.layout.lam_mud]

    def copy(self) -> "PrimalDualPoint":
        return PrimalDualPoint(self.problem, self.y.copy())


class ProblemInstance:
    """Immutable instance data plus the pure numerical operations.

    Power prices are instantiated only for nodes that transmit at least one
    link; a node without outgoing links has the vacuous budget ``0 <= P_max``
    whose multiplier is identically zero and would only add a decoupled
    coordinate to the iteration.
    """

    def __init__(self, topology: Topology, routing: RoutingTable,
                 utility_weights=None, power_budgets=None,
                 noise_power: float = 1.0, aux_concavity: float = 0.0):
        routing.validate(topology)
        self.topology = topology
        self.routing = routing
        self.noise_power = float(noise_power)
        if self.noise_power <= 0.0:
            raise ValueError("noise_power must be positive")
        # strict-concavity term -aux_concavity/2 * (|P|^2 + |c|^2) in the
        # objective; zero keeps the plain sum-log utility, positive values
        # make the objective strictly concave in every primal coordinate
        # (without it the optimal power/rate split is a flat face)
        self.aux_concavity = float(aux_concavity)
        if self.aux_concavity < 0.0:
            raise ValueError("aux_concavity must be nonnegative")

        self.commodities = tuple(sorted(routing.commodities))
        self.power_nodes = tuple(k for k in range(1, topology.num_nodes + 1)
                                 if topology.outgoing_sets[k])
        self.constraints = tuple(enumerate_capacity_constraints(topology))
        nf = topology.num_subbands
        self.pc_keys = tuple((l, n) for l in topology.link_ids
                             for n in range(1, nf + 1))

        n_r = len(self.commodities)
        n_p = len(self.pc_keys)
        n_lr = topology.num_links
        n_lp = len(self.power_nodes)
        n_lm = len(self.constraints)

        if utility_weights is None:
            utility_weights = np.ones(n_r)
        self.utility_weights = np.asarray(utility_weights, dtype=float)
        if self.utility_weights.shape != (n_r,) or np.any(self.utility_weights <= 0):
            raise ValueError("need one positive utility weight per commodity")

        if power_budgets is None:
            power_budgets = {k: 1.0 for k in self.power_nodes}
        self.power_budgets = {k: float(power_budgets[k]) for k in self.power_nodes}
        if any(v <= 0 for v in self.power_budgets.values()):
            raise ValueError("power budgets must be positive")
        self._p_max = np.array([self.power_budgets[k] for k in self.power_nodes])

        start = 0
        slices = []
        for size in (n_r, n_p, n_p, n_lr, n_lp, n_lm):
            slices.append(slice(start, start + size))
            start += size
        labels = (
            tuple(("r",) + ks for ks in self.commodities)
            + tuple(("P",) + ln for ln in self.pc_keys)
            + tuple(("c",) + ln for ln in self.pc_keys)
            + tuple(("lam_r", l) for l in topology.link_ids)
            + tuple(("lam_P", k) for k in self.power_nodes)
            + tuple(("lam_mud", c.rx_node, c.subband, c.links) for c in self.constraints)
        )
        self.layout = Layout(*slices, labels=labels)

        self._build_incidence()

    def _build_incidence(self):
        topo, routing = self.topology, self.routing
        n_r, n_p = len(self.commodities), len(self.pc_keys)
        n_lr, n_lp, n_lm = topo.num_links, len(self.power_nodes), len(self.constraints)
        pc_index = {key: i for i, key in enumerate(self.pc_keys)}

        # commodity i uses link l
        self._m_rl = np.zeros((n_r, n_lr))
        for i, commodity in enumerate(self.commodities):
            for l in routing.links_of_commodity(commodity):
                self._m_rl[i, l - 1] = 1.0

        # per-link sum over subbands of c
        self._k_cl = np.zeros((n_lr, n_p))
        for j, (l, _n) in enumerate(self.pc_keys):
            self._k_cl[l - 1, j] = 1.0

        # power coordinate belongs to the budget of its transmitting node
        self._t_p = np.zeros((n_p, n_lp))
        node_col = {k: i for i, k in enumerate(self.power_nodes)}
        for j, (l, _n) in enumerate(self.pc_keys):
            self._t_p[j, node_col[topo.tx_node(l)]] = 1.0

        # capacity constraint membership over P and c coordinates
        self._mask_mud = np.zeros((n_lm, n_p))
        for i, con in enumerate(self.constraints):
            for l in con.links:
                self._mask_mud[i, pc_index[(l, con.subband)]] = 1.0

        self._gain_perm_cache = {}

    # -- gains ---------------------------------------------------------------

    def power_gains(self, gains: GlobalChannelState) -> np.ndarray:
        """Gain vector aligned with the P/c coordinate order."""
        if gains.chain_keys == self.pc_keys:
            return gains.gain_vector
        perm = self._gain_perm_cache.get(gains.chain_keys)
        if perm is None:
            pos = {key: i for i, key in enumerate(gains.chain_keys)}
            try:
                perm = np.array([pos[key] for key in self.pc_keys])
            except KeyError as exc:
                raise ValueError(f"gains missing chain for {exc.args[0]}") from exc
            self._gain_perm_cache[gains.chain_keys] = perm
        return gains.gain_vector[perm]

    def _mud_terms(self, P: np.ndarray, gains: GlobalChannelState):
        w = self._mask_mud * (self.power_gains(gains) / self.noise_power)
        s = w @ P
        return w, s

    # -- structured accessors --------------------------------------------------

    def point(self, y) -> PrimalDualPoint:
        return PrimalDualPoint(self, np.asarray(y, dtype=float))

    def zeros(self) -> PrimalDualPoint:
        return PrimalDualPoint(self, np.zeros(self.layout.dim))

    def split(self, y):
        lay = self.layout
        return (y[lay.r], y[lay.P], y[lay.c],
                y[lay.lam_r], y[lay.lam_P], y[lay.lam_mud])

    @property
    def power_budget_vector(self) -> np.ndarray:
        """Budgets ordered like the power-price block."""
        return self._p_max.copy()

    def power_usage(self, y) -> np.ndarray:
        """Total transmit power per budget-owning node."""
        return self._t_p.T @ y[self.layout.P]

    def sum_utility(self, y) -> float:
        """Commodity utility only (the reported performance metric)."""
        return float(np.sum(self.utility_weights * np.log1p(y[self.layout.r])))

    def objective(self, y) -> float:
        """Full maximized objective: utilities plus the concavity term."""
        val = self.sum_utility(y)
        if self.aux_concavity > 0.0:
            lay = self.layout
            val -= 0.5 * self.aux_concavity * (
                float(y[lay.P] @ y[lay.P]) + float(y[lay.c] @ y[lay.c]))
        return val

    # -- core operations -------------------------------------------------------

    def constraint_slacks(self, y, gains: GlobalChannelState) -> np.ndarray:
        """Per-constraint slack, ordered like the multiplier blocks.

        Order: flow (per link), power (per owning node), capacity region
        (per rx node, subband, subset); positive means strictly satisfied.
        """
        r, P, c, _, _, _ = self.split(y)
        _w, s = self._mud_terms(P, gains)
        slack_r = self._k_cl @ c - self._m_rl.T @ r
        slack_p = self._p_max - self._t_p.T @ P
        slack_m = np.log1p(s) - self._mask_mud @ c
        return np.concatenate([slack_r, slack_p, slack_m])

    def lagrangian(self, y, gains: GlobalChannelState) -> float:
        lam = y[self.layout.dual]
        return self.objective(y) + float(lam @ self.constraint_slacks(y, gains))

    def fictitious_gradient(self, y, gains: GlobalChannelState) -> np.ndarray:
        """Search direction [grad_x L; -grad_lambda L] in flat order."""
        r, P, c, lam_r, lam_p, lam_m = self.split(y)
        w, s = self._mud_terms(P, gains)
        out = np.empty(self.layout.dim)
        lay = self.layout
        out[lay.r] = self.utility_weights / (1.0 + r) - self._m_rl @ lam_r
        out[lay.P] = w.T @ (lam_m / (1.0 + s)) - self._t_p @ lam_p
        out[lay.c] = self._k_cl.T @ lam_r - self._mask_mud.T @ lam_m
        if self.aux_concavity > 0.0:
            out[lay.P] -= self.aux_concavity * P
            out[lay.c] -= self.aux_concavity * c
        out[lay.lam_r] = self._m_rl.T @ r - self._k_cl @ c
        out[lay.lam_P] = self._t_p.T @ P - self._p_max
        out[lay.lam_mud] = self._mask_mud @ c - np.log1p(s)
        return out

    def fictitious_gradient_batch(self, Y, gains: GlobalChannelState) -> np.ndarray:
        """Fictitious gradient for a batch of iterates, one per row."""
        lay = self.layout
        Y = np.asarray(Y, dtype=float)
        r, P, c = Y[:, lay.r], Y[:, lay.P], Y[:, lay.c]
        lam_r, lam_p, lam_m = Y[:, lay.lam_r], Y[:, lay.lam_P], Y[:, lay.lam_mud]
        w = self._mask_mud * (self.power_gains(gains) / self.noise_power)
        s = P @ w.T
        out = np.empty_like(Y)
        out[:, lay.r] = self.utility_weights / (1.0 + r) - lam_r @ self._m_rl.T
        out[:, lay.P] = (lam_m / (1.0 + s)) @ w - lam_p @ self._t_p.T
        out[:, lay.c] = lam_r @ self._k_cl - lam_m @ self._mask_mud
        if self.aux_concavity > 0.0:
            out[:, lay.P] -= self.aux_concavity * P
            out[:, lay.c] -= self.aux_concavity * c
        out[:, lay.lam_r] = r @ self._m_rl - c @ self._k_cl.T
        out[:, lay.lam_P] = P @ self._t_p - self._p_max
        out[:, lay.lam_mud] = c @ self._mask_mud.T - np.log1p(s)
        return out

    def jacobian(self, y, gains: GlobalChannelState) -> np.ndarray:
        """Jacobian of the fictitious gradient with respect to ``y``.

        The primal-primal block is the (negative semidefinite) Hessian of the
        Lagrangian; the primal-dual and dual-primal blocks are skew pairs.
        """
        r, P, _c, _lr, _lp, lam_m = self.split(y)
        w, s = self._mud_terms(P, gains)
        lay = self.layout
        n = lay.dim
        jac = np.zeros((n, n))

        jac[lay.r, lay.r] = np.diag(-self.utility_weights / (1.0 + r) ** 2)
        jac[lay.P, lay.P] = -(w.T * (lam_m / (1.0 + s) ** 2)) @ w
        if self.aux_concavity > 0.0:
            mu = self.aux_concavity
            jac[lay.P, lay.P] -= mu * np.eye(lay.P.stop - lay.P.start)
            jac[lay.c, lay.c] = -mu * np.eye(lay.c.stop - lay.c.start)

        grad_cap = w / (1.0 + s)[:, None]  # d log-capacity / dP, one row per constraint
        jac[lay.r, lay.lam_r] = -self._m_rl
        jac[lay.P, lay.lam_mud] = grad_cap.T
        jac[lay.P, lay.lam_P] = -self._t_p
        jac[lay.c, lay.lam_r] = self._k_cl.T
        jac[lay.c, lay.lam_mud] = -self._mask_mud.T

        jac[lay.lam_r, lay.r] = self._m_rl.T
        jac[lay.lam_mud, lay.P] = -grad_cap
        jac[lay.lam_P, lay.P] = self._t_p.T
        jac[lay.lam_r, lay.c] = -self._k_cl
        jac[lay.lam_mud, lay.c] = self._mask_mud
        return jac

    def sub_jacobian(self, y, gains: GlobalChannelState, coordinate_group) -> np.ndarray:
        """Rows/columns of the Jacobian restricted to an index group."""
        idx = np.asarray(coordinate_group, dtype=int)
        if idx.ndim != 1 or len(np.unique(idx)) != len(idx):
            raise ValueError("coordinate group must be a set of distinct indices")
        if np.any(idx < 0) or np.any(idx >= self.layout.dim):
            raise ValueError("coordinate index out of range")
        return self.jacobian(y, gains)[np.ix_(idx, idx)]

    def kkt_residual(self, y, gains: GlobalChannelState) -> float:
        """Norm of the unit-scaled projected-step displacement; zero at a saddle."""
        step = np.maximum(y + self.fictitious_gradient(y, gains), 0.0)
        return float(np.linalg.norm(y - step))

    def price_consistency_residual(self, y, gains: GlobalChannelState) -> float:
        """Gap between flow prices and their capacity-price decompositions.

        The dual-decomposition identity equates each link's flow price with
        the summed capacity prices of the subsets containing it; it is not
        enforced by the iteration, only monitored. The gap per (link,
        subband) is exactly the auxiliary-rate component of the fictitious
        gradient, reported over coordinates the projection has not pinned.
        """
        grad = self.fictitious_gradient(y, gains)
        lay = self.layout
        gap = grad[lay.c]
        active = (y[lay.c] > 1e-10) | (gap > 0)
        return float(np.max(np.abs(gap[active]))) if np.any(active) else 0.0

    def free_mask(self, y, gains: GlobalChannelState, tol: float = 1e-10) -> np.ndarray:
        """Coordinates not pinned at the boundary by the projection.

        A coordinate is pinned when it sits at zero and its fictitious
        gradient pushes outward (nonpositive).
        """
        grad = self.fictitious_gradient(y, gains)
        return (y > tol) | (grad > 0.0)
