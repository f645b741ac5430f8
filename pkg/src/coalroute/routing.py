"""Exact routing oracles.

Single-vehicle TSP via Held-Karp bitmask dynamic programming, and the
uncapacitated multi-depot VRP via per-vehicle subset tour tables combined
with a set-partition DP (every participating vehicle must serve at least one
customer). Problem sizes here are tiny (at most 9 customers for the grand
coalition, 12 for the standalone TSP bound), so exact enumeration of the DP
state space is cheap; the kernels are numba-compiled because coalition values
are evaluated hundreds of thousands of times during evaluation and training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .instances import Instance, Location

MAX_TSP_CUSTOMERS = 12


class RoutingInputError(ValueError):
    """Raised for malformed routing queries (size bounds, bad coalitions)."""


@dataclass(frozen=True)
class Tour:
    """A closed route: depot -> sequence of customers -> depot.

    ``vehicle`` is the owning agent (1..3) in multi-depot solutions, or None
    for a standalone TSP query. ``sequence`` holds customer indices; for
    standalone queries they index the caller's customer list, for multi-depot
    solutions they are global delivery-row indices of the instance.
    """

    vehicle: int | None
    sequence: tuple[int, ...]
    cost: float


@dataclass(frozen=True)
class RoutingSolution:
    tours: tuple[Tour, ...]
    total_cost: float


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _held_karp_paths(d_cc: np.ndarray, d_dep: np.ndarray) -> np.ndarray:
    """dp[mask, j] = cheapest path depot -> (visit exactly `mask`) -> customer j."""
    m = d_dep.shape[0]
    size = 1 << m
    dp = np.full((size, m), np.inf)
    for j in range(m):
        dp[1 << j, j] = d_dep[j]
    for mask in range(size):
        for j in range(m):
            if (mask >> j) & 1 == 0:
                continue
            cur = dp[mask, j]
            if not np.isfinite(cur):
                continue
            for k in range(m):
                if (mask >> k) & 1:
                    continue
                nm = mask | (1 << k)
                nc = cur + d_cc[j, k]
                if nc < dp[nm, k]:
                    dp[nm, k] = nc
    return dp


@njit(cache=True, nogil=True)
def _closed_tour_costs(dp: np.ndarray, d_dep: np.ndarray) -> np.ndarray:
    """costs[mask] = cheapest closed tour over the customer subset `mask`."""
    size, m = dp.shape
    costs = np.empty(size)
    costs[0] = 0.0
    for mask in range(1, size):
        best = np.inf
        for j in range(m):
            if (mask >> j) & 1:
                c = dp[mask, j] + d_dep[j]
                if c < best:
                    best = c
        costs[mask] = best
    return costs


@njit(cache=True, nogil=True)
def _partition_assign(cost_tables: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min-cost partition of all customers into one non-empty subset per vehicle.

    ``cost_tables[k, S]`` is vehicle k's closed-tour cost over subset S.
    Returns the DP table g and the chosen subset per (vehicle, state) for
    reconstruction. Ties keep the first minimum found (submasks enumerated
    descending), which makes the assignment deterministic.
    """
    n_vehicles, size = cost_tables.shape
    g = np.full((n_vehicles + 1, size), np.inf)
    choice = np.zeros((n_vehicles + 1, size), dtype=np.int64)
    g[0, 0] = 0.0
    for ki in range(1, n_vehicles + 1):
        for s in range(size):
            best = np.inf
            best_t = 0
            t = s
            while t > 0:
                prev = g[ki - 1, s ^ t]
                if np.isfinite(prev):
                    c = prev + cost_tables[ki - 1, t]
                    if c < best:
                        best = c
                        best_t = t
                t = (t - 1) & s
            g[ki, s] = best
            choice[ki, s] = best_t
    return g, choice


# ---------------------------------------------------------------------------
# Reconstruction and wrappers
# ---------------------------------------------------------------------------


def _backtrack_sequence(dp: np.ndarray, d_cc: np.ndarray, d_dep: np.ndarray, mask: int) -> tuple[int, ...]:
    """Recover one optimal visiting order for `mask`, deterministically."""
    if mask == 0:
        return ()
    m = dp.shape[1]
    best = math.inf
    end = -1
    for j in range(m):
        if (mask >> j) & 1:
            c = dp[mask, j] + d_dep[j]
            if c < best:
                best = c
                end = j
    seq = [end]
    cur_mask, cur = mask, end
    while cur_mask != (1 << cur):
        prev_mask = cur_mask ^ (1 << cur)
        nxt = -1
        for k in range(m):
            if (prev_mask >> k) & 1 and dp[prev_mask, k] + d_cc[k, cur] == dp[cur_mask, cur]:
                nxt = k
                break
        if nxt < 0:  # float tie fell between stored sums; take any member
            for k in range(m):
                if (prev_mask >> k) & 1:
                    nxt = k
                    break
        seq.append(nxt)
        cur_mask, cur = prev_mask, nxt
    seq.reverse()
    forward = tuple(seq)
    backward = tuple(reversed(seq))
    # A tour and its reversal cost the same; keep the lexicographically
    # smaller index sequence so repeated solves return identical tours.
    return min(forward, backward)


def _distance_arrays(depot: Location, customers: list[Location]) -> tuple[np.ndarray, np.ndarray]:
    # hypot (not sqrt of squared sums) so distances agree to the last bit
    # with scalar euclidean_distance everywhere in the package.
    xy = np.array([(c.x, c.y) for c in customers], dtype=np.float64)
    diff = xy[:, None, :] - xy[None, :, :]
    d_cc = np.hypot(diff[:, :, 0], diff[:, :, 1])
    d_dep = np.hypot(xy[:, 0] - depot.x, xy[:, 1] - depot.y)
    return d_cc, d_dep


def tour_cost(depot: Location, customers: list[Location], sequence: tuple[int, ...]) -> float:
    """Recompute a closed tour's length from its visiting order."""
    if not sequence:
        return 0.0
    from .instances import euclidean_distance

    total = euclidean_distance(depot, customers[sequence[0]])
    for a, b in zip(sequence, sequence[1:]):
        total += euclidean_distance(customers[a], customers[b])
    total += euclidean_distance(customers[sequence[-1]], depot)
    return total


def _orient_sequence(
    depot: Location, customers: list[Location], sequence: tuple[int, ...]
) -> tuple[int, ...]:
    """Pick the traversal direction whose left-to-right sum is smaller.

    A closed tour and its reverse cover the same edges, but float addition
    is order-dependent, so the two directions can differ by one ulp.
    Reporting the cheaper direction makes oracle costs bit-reproducible by
    any independent enumerator that scans both directions.
    """
    if len(sequence) < 2:
        return sequence
    reverse = sequence[::-1]
    if tour_cost(depot, customers, reverse) < tour_cost(depot, customers, sequence):
        return reverse
    return sequence


def tsp_exact(depot: Location, customers: list[Location] | tuple[Location, ...]) -> Tour:
    """Optimal closed tour from `depot` through every customer.

    Returns a zero-cost empty tour for an empty customer list. Rejects more
    than 12 customers (the DP table would be needlessly large for this
    problem family). The reported cost is recomputed along the returned
    sequence, not taken from the DP accumulator, so it is bit-identical to
    a brute-force enumerator's result for the same optimal tour.
    """
    customers = list(customers)
    if len(customers) > MAX_TSP_CUSTOMERS:
        raise RoutingInputError(f"tsp_exact supports at most {MAX_TSP_CUSTOMERS} customers, got {len(customers)}")
    if not customers:
        return Tour(vehicle=None, sequence=(), cost=0.0)
    d_cc, d_dep = _distance_arrays(depot, customers)
    dp = _held_karp_paths(d_cc, d_dep)
    full = (1 << len(customers)) - 1
    seq = _backtrack_sequence(dp, d_cc, d_dep, full)
    seq = _orient_sequence(depot, customers, seq)
    return Tour(vehicle=None, sequence=seq, cost=tour_cost(depot, customers, seq))


def _check_coalition(coalition) -> tuple[int, ...]:
    members = tuple(sorted(set(int(a) for a in coalition)))
    if not members:
        raise RoutingInputError("coalition must contain at least one agent")
    for a in members:
        if a not in (1, 2, 3):
            raise RoutingInputError(f"coalition members must be agents 1..3, got {a}")
    return members


def mdvrp_exact(instance: Instance, coalition) -> RoutingSolution:
    """Optimal pooled routing for a coalition.

    Every member contributes one vehicle based at its own depot; the
    coalition's customers are partitioned among the vehicles, each vehicle
    serving at least one customer on a single closed tour. Uncapacitated.
    """
    members = _check_coalition(coalition)
    rows: list[int] = []
    for agent in members:
        agent_rows = instance.customer_rows(agent)
        if not agent_rows:
            raise RoutingInputError(f"agent {agent} has no deliveries in this instance")
        rows.extend(agent_rows)
    customers = [instance.deliveries[r] for r in rows]
    m = len(customers)

    xy = np.array([(c.x, c.y) for c in customers], dtype=np.float64)
    diff = xy[:, None, :] - xy[None, :, :]
    d_cc = np.hypot(diff[:, :, 0], diff[:, :, 1])

    dps: list[np.ndarray] = []
    d_deps: list[np.ndarray] = []
    tables = np.empty((len(members), 1 << m), dtype=np.float64)
    for vi, agent in enumerate(members):
        depot = instance.depot(agent)
        d_dep = np.hypot(xy[:, 0] - depot.x, xy[:, 1] - depot.y)
        dp = _held_karp_paths(d_cc, d_dep)
        dps.append(dp)
        d_deps.append(d_dep)
        tables[vi] = _closed_tour_costs(dp, d_dep)

    _, choice = _partition_assign(tables)
    full = (1 << m) - 1

    # Recover the chosen subset per vehicle, then each vehicle's tour order.
    subsets: list[int] = [0] * len(members)
    s = full
    for ki in range(len(members), 0, -1):
        t = int(choice[ki, s])
        subsets[ki - 1] = t
        s ^= t
    # Costs are recomputed along each oriented tour rather than read from the
    # DP tables, so totals are bit-identical to an independent enumerator's.
    tours = []
    total = 0.0
    for vi, agent in enumerate(members):
        depot = instance.depot(agent)
        local_seq = _backtrack_sequence(dps[vi], d_cc, d_deps[vi], subsets[vi])
        local_seq = _orient_sequence(depot, customers, local_seq)
        cost = tour_cost(depot, customers, local_seq)
        total += cost
        tours.append(
            Tour(
                vehicle=agent,
                sequence=tuple(rows[i] for i in local_seq),
                cost=cost,
            )
        )
    return RoutingSolution(tours=tuple(tours), total_cost=total)


def subset_tour_cost_table(instance: Instance, agent: int, rows: list[int]) -> np.ndarray:
    """Closed-tour cost of every subset of `rows` for `agent`'s vehicle."""
    customers = [instance.deliveries[r] for r in rows]
    d_cc, d_dep = _distance_arrays(instance.depot(agent), customers)
    dp = _held_karp_paths(d_cc, d_dep)
    return _closed_tour_costs(dp, d_dep)
