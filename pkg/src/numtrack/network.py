"""Multihop network topology, commodity routing and multi-access capacity regions.

Links are directed edges between nodes; every link belongs to exactly one
interference set (grouped by receiving node) and one outgoing set (grouped
by transmitting node). Receivers run multiuser detection, so the achievable
per-subband rates of the links arriving at a node are constrained by one
inequality per nonempty subset of that node's interference set.

Node and link ids are 1-based throughout, matching the built-in 6-node
example.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "Topology",
    "RoutingTable",
    "CapacityConstraint",
    "ConstraintCount",
    "build_topology",
    "builtin_figure1",
    "enumerate_capacity_constraints",
    "constraint_count",
    "check_rate_in_region",
]


@dataclass(frozen=True)
class Topology:
    """Directed multihop network operating over ``num_subbands`` subbands."""

    num_nodes: int
    links: tuple  # links[l-1] = (tx_node, rx_node) for link id l
    num_subbands: int
    interference_sets: dict  # node -> ordered tuple of link ids received there
    outgoing_sets: dict      # node -> ordered tuple of link ids sent from there

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def link_ids(self) -> tuple:
        return tuple(range(1, len(self.links) + 1))

    def tx_node(self, link: int) -> int:
        return self.links[link - 1][0]

    def rx_node(self, link: int) -> int:
        return self.links[link - 1][1]


def build_topology(num_nodes: int, links, num_subbands: int) -> Topology:
    """Derive the interference / outgoing partitions from the edge list."""
    links = tuple((int(a), int(b)) for a, b in links)
    if num_subbands < 1:
        raise ValueError("num_subbands must be >= 1")
    for tx, rx in links:
        if not (1 <= tx <= num_nodes and 1 <= rx <= num_nodes):
            raise ValueError(f"link endpoint out of range: {(tx, rx)}")
        if tx == rx:
            raise ValueError(f"self-loop link: {(tx, rx)}")
    interference = {k: [] for k in range(1, num_nodes + 1)}
    outgoing = {k: [] for k in range(1, num_nodes + 1)}
    for lid, (tx, rx) in enumerate(links, start=1):
        outgoing[tx].append(lid)
        interference[rx].append(lid)
    return Topology(
        num_nodes=num_nodes,
        links=links,
        num_subbands=num_subbands,
        interference_sets={k: tuple(v) for k, v in interference.items()},
        outgoing_sets={k: tuple(v) for k, v in outgoing.items()},
    )


@dataclass(frozen=True)
class RoutingTable:
    """Fixed single-route commodities.

    A commodity is identified by ``(source_node, stream_index)``. The table
    stores, for every link, the set of commodities routed over it, plus each
    commodity's destination node.
    """

    commodities: tuple               # ordered tuple of (source_node, stream)
    link_membership: dict            # link id -> frozenset of commodities
    destinations: dict               # commodity -> destination node

    def commodities_of_source(self, node: int) -> tuple:
        return tuple(c for c in self.commodities if c[0] == node)

    def links_of_commodity(self, commodity) -> tuple:
        return tuple(sorted(l for l, members in self.link_membership.items()
                            if commodity in members))

    def validate(self, topology: Topology) -> None:
        for commodity in self.commodities:
            if not self.links_of_commodity(commodity):
                raise ValueError(f"commodity {commodity} is routed over no link")
            if commodity not in self.destinations:
                raise ValueError(f"commodity {commodity} has no destination")
        for link in self.link_membership:
            if link not in topology.link_ids:
                raise ValueError(f"routing references unknown link {link}")


class CapacityConstraint(NamedTuple):
    """One subset inequality of a receiver's multi-access capacity region."""

    rx_node: int
    subband: int
    links: tuple  # nonempty subset of the node's interference set, sorted


def builtin_figure1(num_subbands: int = 2):
    """The built-in 6-node / 8-link instance with four 2-commodity sources.

    Interference sets: I2={1,4}, I3={2,6}, I4={3}, I5={5,7}, I6={8};
    outgoing sets: P1={1,3}, P2={2,5}, P4={4,7}, P5={6,8}.
    """
    links = [
        (1, 2),  # link 1
        (2, 3),  # link 2
        (1, 4),  # link 3
        (4, 2),  # link 4
        (2, 5),  # link 5
        (5, 3),  # link 6
        (4, 5),  # link 7
        (5, 6),  # link 8
    ]
    topology = build_topology(6, links, num_subbands)

    # commodity -> (links used, destination)
    routes = {
        (1, 1): ((3, 7, 8), 6),
        (1, 2): ((1, 2), 3),
        (2, 1): ((2,), 3),
        (2, 2): ((5, 8), 6),
        (4, 1): ((2, 4), 3),
        (4, 2): ((6, 7), 3),
        (5, 1): ((8,), 6),
        (5, 2): ((6,), 3),
    }
    membership = {l: set() for l in topology.link_ids}
    for commodity, (route, _dest) in routes.items():
        for l in route:
            membership[l].add(commodity)
    routing = RoutingTable(
        commodities=tuple(sorted(routes)),
        link_membership={l: frozenset(m) for l, m in membership.items()},
        destinations={c: d for c, (_r, d) in routes.items()},
    )
    routing.validate(topology)
    return topology, routing


def enumerate_capacity_constraints(topology: Topology):
    """All subset inequalities, ordered by (node, subband, subset bitmask).

    Bit ``i`` of the bitmask corresponds to position ``i`` in the node's
    ordered interference set.
    """
    out = []
    for node in range(1, topology.num_nodes + 1):
        group = topology.interference_sets[node]
        if not group:
            continue
        for subband in range(1, topology.num_subbands + 1):
            for mask in range(1, 1 << len(group)):
                subset = tuple(group[i] for i in range(len(group)) if mask & (1 << i))
                out.append(CapacityConstraint(node, subband, subset))
    return out


class ConstraintCount(NamedTuple):
    """Constraint tally: the single-subband formula value and the full count."""

    literal: int       # K + L + sum_k (2^|I_k| - 1)
    per_subband: int   # K + L + N_F * sum_k (2^|I_k| - 1)


def constraint_count(topology: Topology, routing: RoutingTable) -> ConstraintCount:
    """Count power + flow + capacity-region constraints.

    The capacity-region constraints are instantiated once per subband; the
    ``literal`` field reports the single-subband tally for reference.
    """
    mud = sum((1 << len(g)) - 1 for g in topology.interference_sets.values())
    base = topology.num_nodes + topology.num_links
    return ConstraintCount(base + mud, base + topology.num_subbands * mud)


def check_rate_in_region(rates, powers, gains, rx_node: int, subband: int,
                         noise_power: float, topology: Topology) -> bool:
    """Membership test for a receiver's multi-access capacity region.

    ``rates`` and ``powers`` are ordered by the node's interference set; the
    rate of every subset of links must not exceed ``log(1 + sum(g*P)/sigma^2)``
    (natural log) over that subset.
    """
    group = topology.interference_sets[rx_node]
    rates = np.asarray(rates, dtype=float)
    powers = np.asarray(powers, dtype=float)
    if rates.shape != (len(group),) or powers.shape != (len(group),):
        raise ValueError("rates/powers must align with the interference set")
    if np.any(rates < 0.0) or np.any(powers < 0.0):
        raise ValueError("rates and powers must be nonnegative")
    g = np.array([gains.gain(l, subband) for l in group])
    for mask in range(1, 1 << len(group)):
        pick = np.array([bool(mask & (1 << i)) for i in range(len(group))])
        cap = np.log1p(np.sum(g[pick] * powers[pick]) / noise_power)
        if np.sum(rates[pick]) > cap:
            return False
    return True
