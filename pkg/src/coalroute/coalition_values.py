"""Cooperative-game layer on top of the routing oracles.

The characteristic value of a coalition is the collaboration gain: total
welfare the members obtain by pooling customers minus the sum of their
stand-alone profits. Revenues cancel, so the gain reduces to the members'
stand-alone tour costs minus the pooled multi-depot routing cost. That form
is used in code because the pooled optimum can never exceed the
keep-your-own-customers assignment (which the partition DP evaluates with
bit-identical arithmetic), making v({i}) = 0 and v(C) >= 0 exact in floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .instances import REVENUE_PER_DELIVERY, Instance
from .routing import RoutingInputError, Tour, mdvrp_exact, tsp_exact

N_AGENTS = 3
GRAND_MASK = (1 << N_AGENTS) - 1  # 0b111
ALL_MASKS = tuple(range(1, GRAND_MASK + 1))
DEGENERATE_TOL = 1e-12


class IncompleteTableError(ValueError):
    """Raised when a characteristic table is missing coalition entries."""


def mask_of(members) -> int:
    mask = 0
    for a in members:
        a = int(a)
        if a not in (1, 2, 3):
            raise RoutingInputError(f"coalition members must be agents 1..3, got {a}")
        mask |= 1 << (a - 1)
    return mask


def members_of(mask: int) -> tuple[int, ...]:
    return tuple(a for a in (1, 2, 3) if mask & (1 << (a - 1)))


def coalition_size(mask: int) -> int:
    return bin(mask).count("1")


def standalone_tour(instance: Instance, agent: int) -> Tour:
    """The agent's optimal tour over its own customers from its own depot."""
    return tsp_exact(instance.depot(agent), instance.customers(agent))


def pre_collab_profit(instance: Instance, agent: int) -> float:
    """Revenue of the agent's own deliveries minus its stand-alone tour cost."""
    revenue = REVENUE_PER_DELIVERY * len(instance.customers(agent))
    return revenue - standalone_tour(instance, agent).cost


@dataclass(frozen=True)
class CharacteristicTable:
    """All seven non-empty coalition values for one instance.

    ``values[mask]`` is the collaboration gain v(C); ``pre_profits`` the
    stand-alone profits; ``post_welfare[mask]`` the pooled welfare
    (member revenues minus the pooled routing cost). ``v(empty) = 0`` by
    convention and is not stored.
    """

    values: dict[int, float]
    pre_profits: tuple[float, float, float]
    post_welfare: dict[int, float]

    def v(self, coalition) -> float:
        mask = coalition if isinstance(coalition, int) else mask_of(coalition)
        if mask == 0:
            return 0.0
        if mask not in self.values:
            raise IncompleteTableError(f"no value stored for coalition mask {mask}")
        return self.values[mask]

    def per_capita(self, coalition) -> float:
        mask = coalition if isinstance(coalition, int) else mask_of(coalition)
        return self.v(mask) / coalition_size(mask)

    @property
    def degenerate(self) -> bool:
        """True when even the grand coalition gains nothing."""
        return self.v(GRAND_MASK) <= DEGENERATE_TOL

    @classmethod
    def from_values(cls, values: dict[int, float]) -> "CharacteristicTable":
        missing = [m for m in ALL_MASKS if m not in values]
        if missing:
            raise IncompleteTableError(f"missing coalition masks {missing}")
        welfare = {m: float(values[m]) for m in ALL_MASKS}
        return cls(values=dict(values), pre_profits=(0.0, 0.0, 0.0), post_welfare=welfare)


class ValueOracle:
    """Per-instance cache of coalition values.

    Stand-alone tours are solved once up front; pooled costs are solved
    lazily, coalition by coalition, so a bargaining episode only pays for
    the coalition that was actually agreed.
    """

    def __init__(self, instance: Instance):
        self.instance = instance
        self._standalone = {a: standalone_tour(instance, a) for a in (1, 2, 3)}
        self._values: dict[int, float] = {}
        self._pooled_cost: dict[int, float] = {}

    def standalone_cost(self, agent: int) -> float:
        return self._standalone[agent].cost

    def pooled_cost(self, mask: int) -> float:
        if mask not in self._pooled_cost:
            members = members_of(mask)
            if len(members) == 1:
                self._pooled_cost[mask] = self._standalone[members[0]].cost
            else:
                self._pooled_cost[mask] = _mdvrp_cost_only(self.instance, members)
        return self._pooled_cost[mask]

    def value(self, coalition) -> float:
        mask = coalition if isinstance(coalition, int) else mask_of(coalition)
        if mask == 0:
            return 0.0
        if mask not in self._values:
            members = members_of(mask)
            if len(members) == 1:
                self._values[mask] = 0.0
            else:
                own = 0.0
                for a in members:
                    own += self._standalone[a].cost
                self._values[mask] = own - self.pooled_cost(mask)
        return self._values[mask]

    def table(self) -> CharacteristicTable:
        values = {m: self.value(m) for m in ALL_MASKS}
        pre = tuple(
            REVENUE_PER_DELIVERY * len(self.instance.customers(a)) - self._standalone[a].cost
            for a in (1, 2, 3)
        )
        welfare = {
            m: REVENUE_PER_DELIVERY * 3 * coalition_size(m) - self.pooled_cost(m) for m in ALL_MASKS
        }
        return CharacteristicTable(values=values, pre_profits=pre, post_welfare=welfare)


def _mdvrp_cost_only(instance: Instance, members: tuple[int, ...]) -> float:
    """Pooled routing cost for a coalition (canonical tour-order summation)."""
    return mdvrp_exact(instance, members).total_cost


def collaboration_gain(instance: Instance, coalition) -> float:
    """v(C): what the coalition gains over its members staying solo.

    Zero for singletons by construction; never negative (keeping every
    member's own customers is always a feasible pooled solution).
    """
    mask = coalition if isinstance(coalition, int) else mask_of(coalition)
    members = members_of(mask)
    if not members:
        raise RoutingInputError("coalition must contain at least one agent")
    if len(members) == 1:
        return 0.0
    own = 0.0
    for a in members:
        own += standalone_tour(instance, a).cost
    return own - mdvrp_exact(instance, members).total_cost


def characteristic_table(instance: Instance) -> CharacteristicTable:
    """Values of all seven non-empty coalitions (memoized routing solves)."""
    return ValueOracle(instance).table()


def shapley(table: CharacteristicTable) -> np.ndarray:
    """Shapley value of each agent under the table's characteristic function.

    Subset-weighted marginal form with v(empty) = 0. For three agents the
    weights are 1/3 (empty and full complements) and 1/6 (one-agent
    complements).
    """
    n = N_AGENTS
    phi = np.zeros(n, dtype=np.float64)
    for agent in (1, 2, 3):
        bit = 1 << (agent - 1)
        others = [m for m in range(GRAND_MASK + 1) if not m & bit]
        for sub in others:
            size = coalition_size(sub)
            weight = factorial(size) * factorial(n - 1 - size) / factorial(n)
            v_without = table.v(sub) if sub else 0.0
            phi[agent - 1] += weight * (table.v(sub | bit) - v_without)
    return phi


def best_coalition_for(table: CharacteristicTable, agent: int) -> tuple[int, float]:
    """The agent's per-capita-optimal coalition among those containing it.

    Only coalitions of size >= 2 are considered (singletons gain nothing).
    Ties prefer fewer members, then the smaller mask. For a degenerate table
    every coalition is worthless; the grand coalition with gain 0 is returned
    and callers should consult ``table.degenerate``.
    """
    if agent not in (1, 2, 3):
        raise RoutingInputError(f"agent must be in 1..3, got {agent}")
    if table.degenerate:
        return GRAND_MASK, 0.0
    bit = 1 << (agent - 1)
    best_mask = -1
    best_pc = -np.inf
    best_size = 0
    for mask in ALL_MASKS:
        if not mask & bit or coalition_size(mask) < 2:
            continue
        pc = table.per_capita(mask)
        size = coalition_size(mask)
        if pc > best_pc or (
            pc == best_pc and (size < best_size or (size == best_size and mask < best_mask))
        ):
            best_mask, best_pc, best_size = mask, pc, size
    return best_mask, best_pc
