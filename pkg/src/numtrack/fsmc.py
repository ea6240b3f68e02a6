"""Finite-state Markov fading channels with ring-structured transitions.

Each (link, subband) pair carries an independent Markov chain over a small
set of power-gain levels. The transition matrix is a circulant ring: stay
with probability ``nu = 1 - 2*eps``, hop to either ring neighbour with
probability ``eps``. The aggregate channel state is the tuple of per-chain
states; it is never materialized as a product chain, only stepped
coordinate-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinkChannelChain",
    "GlobalChannelState",
    "ChannelProcess",
    "rayleigh_power_levels",
    "build_link_chain",
    "build_channel_process",
    "aggregate_stay_probability",
    "mean_sojourn_slots",
    "write_state_trace",
]


def rayleigh_power_levels(num_states: int) -> np.ndarray:
    """Gain levels from an equiprobable partition of a unit-mean exponential.

    The power gain of a Rayleigh-faded link is exponentially distributed.
    The distribution is cut into ``num_states`` equiprobable cells and each
    level is the conditional mean of its cell, so the levels are strictly
    increasing and average to one.
    """
    if num_states < 1:
        raise ValueError("num_states must be positive")
    edges = -np.log1p(-np.arange(num_states) / num_states)
    # integral of x*exp(-x) over [a, b) is (a+1)e^-a - (b+1)e^-b; the last
    # cell is [a, inf) where the upper term vanishes
    upper = np.zeros(num_states + 1)
    upper[:-1] = (edges + 1.0) * np.exp(-edges)
    mass = np.exp(-edges)
    mass[:-1] -= mass[1:]
    mass[-1] = np.exp(-edges[-1])
    return (upper[:-1] - upper[1:]) / mass


def build_link_chain(num_states: int, epsilon: float, gain_levels=None) -> "LinkChannelChain":
    """Build one ring-structured chain for a single (link, subband) gain.

    ``gain_levels`` defaults to :func:`rayleigh_power_levels`. The ring needs
    at least three states so the two neighbours of a state are distinct.
    """
    if num_states < 3:
        raise ValueError("num_states must be >= 3 (ring structure degenerate below that)")
    if not 0.0 < epsilon <= 0.5:
        raise ValueError("epsilon must lie in (0, 1/2]")
    if gain_levels is None:
        gain_levels = rayleigh_power_levels(num_states)
    gain_levels = np.asarray(gain_levels, dtype=float)
    if gain_levels.shape != (num_states,):
        raise ValueError("gain_levels length must equal num_states")
    if np.any(gain_levels <= 0.0):
        raise ValueError("gain_levels must be strictly positive")
    if np.any(np.diff(gain_levels) <= 0.0):
        raise ValueError("gain_levels must be strictly increasing")

    nu = 1.0 - 2.0 * epsilon
    matrix = np.zeros((num_states, num_states))
    idx = np.arange(num_states)
    matrix[idx, idx] = nu
    matrix[idx, (idx + 1) % num_states] += epsilon
    matrix[idx, (idx - 1) % num_states] += epsilon
    return LinkChannelChain(num_states, epsilon, gain_levels, matrix)


@dataclass(frozen=True)
class LinkChannelChain:
    """Ring-structured Markov chain over the gain levels of one chain."""

    num_states: int
    epsilon: float
    gain_levels: np.ndarray
    transition_matrix: np.ndarray

    @property
    def nu(self) -> float:
        """Self-transition (stay) probability."""
        return 1.0 - 2.0 * self.epsilon


@dataclass(frozen=True)
class GlobalChannelState:
    """Realized gains of all chains at one slot.

    ``state_index`` is the tuple of per-chain level indices and doubles as
    the canonical hashable state id. ``chain_keys`` pairs each position with
    its (link, subband) key, in the same (link-major) order used for the
    power coordinates of the optimization problem.
    """

    state_index: tuple
    chain_keys: tuple
    gain_vector: np.ndarray

    @property
    def gains(self) -> dict:
        """Mapping (link, subband) -> realized power gain."""
        return dict(zip(self.chain_keys, self.gain_vector))

    def gain(self, link: int, subband: int) -> float:
        return self.gain_vector[self.chain_keys.index((link, subband))]


class ChannelProcess:
    """Collection of independent chains stepped by a shared seeded RNG.

    The uniform draws are consumed one row (all chains) per slot, so a
    sequence of ``step`` calls and a single ``step_block`` consume the RNG
    identically; replaying a seed reproduces the state sequence exactly.
    """

    def __init__(self, chains, chain_keys, rng_seed: int, initial_index=None):
        chains = list(chains)
        chain_keys = [tuple(k) for k in chain_keys]
        if len(chains) != len(chain_keys):
            raise ValueError("one key per chain required")
        if len(set(chain_keys)) != len(chain_keys):
            raise ValueError("chain keys must be unique")
        self.chains = chains
        self.chain_keys = tuple(chain_keys)
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._num_states = np.array([c.num_states for c in chains])
        self._nu = np.array([c.nu for c in chains])
        self._eps = np.array([c.epsilon for c in chains])
        self._levels = [c.gain_levels for c in chains]
        if initial_index is None:
            # deterministic start: every chain at its lowest level
            initial_index = np.zeros(len(chains), dtype=np.int64)
        self._index = np.asarray(initial_index, dtype=np.int64).copy()
        if np.any(self._index < 0) or np.any(self._index >= self._num_states):
            raise ValueError("initial_index out of range")

    @property
    def num_chains(self) -> int:
        return len(self.chains)

    def _state_from_index(self, index) -> GlobalChannelState:
        gains = np.array([lv[i] for lv, i in zip(self._levels, index)])
        return GlobalChannelState(tuple(int(i) for i in index), self.chain_keys, gains)

    @property
    def current(self) -> GlobalChannelState:
        return self._state_from_index(self._index)

    def step(self) -> GlobalChannelState:
        """Advance every chain one slot and return the new global state."""
        u = self._rng.random(self.num_chains)
        move = np.where(u < self._nu, 0, np.where(u < self._nu + self._eps, 1, -1))
        self._index = (self._index + move) % self._num_states
        return self.current

    def step_block(self, num_slots: int) -> np.ndarray:
        """Advance ``num_slots`` slots; return the (num_slots, num_chains) index path.

        Row ``t`` is the state after slot ``t``'s transition, matching what
        ``num_slots`` successive :meth:`step` calls would visit.
        """
        u = self._rng.random((num_slots, self.num_chains))
        move = np.where(u < self._nu, 0, np.where(u < self._nu + self._eps, 1, -1))
        path = (self._index + np.cumsum(move, axis=0)) % self._num_states
        self._index = path[-1].copy()
        return path

    def state_at(self, index) -> GlobalChannelState:
        """Materialize the global state for an arbitrary index tuple."""
        return self._state_from_index(np.asarray(index, dtype=np.int64))


def build_channel_process(chain_keys, num_states: int, epsilon: float,
                          rng_seed: int, gain_levels=None) -> ChannelProcess:
    """Homogeneous process: one identical ring chain per key."""
    chain = build_link_chain(num_states, epsilon, gain_levels)
    return ChannelProcess([chain] * len(list(chain_keys)), chain_keys, rng_seed)


def aggregate_stay_probability(process: ChannelProcess) -> float:
    """Probability that the global state is unchanged over one slot.

    Chains are independent, so this is the product of the per-chain stay
    probabilities ``nu``.
    """
    return float(np.prod([c.nu for c in process.chains]))


def mean_sojourn_slots(process: ChannelProcess) -> float:
    """Mean sojourn time of the aggregate state, in slots.

    Sojourns are geometric with success probability ``1 - p_stay``, so the
    mean is ``1 / (1 - p_stay)``.
    """
    p_stay = aggregate_stay_probability(process)
    if p_stay >= 1.0:
        raise ValueError("frozen channel: sojourn time is infinite")
    return 1.0 / (1.0 - p_stay)


def write_state_trace(process: ChannelProcess, num_slots: int, path) -> None:
    """Dump a per-chain state trace as CSV: slot, chain_id, state_index, gain."""
    with open(path, "w", newline="") as fh:
        fh.write("slot,chain_id,state_index,gain\n")
        for t in range(num_slots):
            state = process.step()
            for cid, (idx, gain) in enumerate(zip(state.state_index, state.gain_vector)):
                fh.write(f"{t},{cid},{idx},{gain!r}\n")
