"""Delivery instances for three carriers on the unit plane.

An instance holds 12 delivery rows: one depot per agent followed by three
customers per agent, grouped by owner. Depot coordinates are fixed; customers
are drawn uniformly inside a disc around their depot whose radius is sampled
per depot from a small set. Revenue is 1 per customer delivery.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

N_AGENTS = 3
CUSTOMERS_PER_AGENT = 3
N_DELIVERIES = N_AGENTS + N_AGENTS * CUSTOMERS_PER_AGENT  # 12 rows

DEPOT_COORDS: tuple[tuple[float, float], ...] = ((-0.2, 0.173), (0.2, 0.173), (0.0, -0.173))
SERVICE_RADII: tuple[float, ...] = (0.3, 0.4, 0.6)
REVENUE_PER_DELIVERY = 1.0

# Slack for containment checks on round-tripped coordinates.
_CONTAINMENT_EPS = 1e-9


class ValidationError(ValueError):
    """Raised when an instance (in memory or on disk) violates the schema."""


@dataclass(frozen=True)
class Location:
    """One delivery row: planar position, owning agent (1..3), depot flag."""

    x: float
    y: float
    owner: int
    is_depot: bool

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, float(self.owner), 1.0 if self.is_depot else 0.0)


def euclidean_distance(a: Location, b: Location) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class Instance:
    """An immutable 12-row delivery instance.

    Row layout: rows 0-2 are the depots of agents 1-3; rows 3-5, 6-8, 9-11
    are the customers of agents 1, 2, 3. ``seed`` is an opaque identifier of
    the generating stream, carried through serialization.
    """

    deliveries: tuple[Location, ...]
    radii: tuple[float, float, float]
    seed: int

    def __post_init__(self) -> None:
        validate_rows(self.deliveries, self.radii)

    def depot(self, agent: int) -> Location:
        _check_agent(agent)
        return self.deliveries[agent - 1]

    def customers(self, agent: int) -> tuple[Location, ...]:
        _check_agent(agent)
        lo = N_AGENTS + (agent - 1) * CUSTOMERS_PER_AGENT
        return self.deliveries[lo : lo + CUSTOMERS_PER_AGENT]

    def customer_rows(self, agent: int) -> tuple[int, ...]:
        """Global row indices (into ``deliveries``) of an agent's customers."""
        _check_agent(agent)
        lo = N_AGENTS + (agent - 1) * CUSTOMERS_PER_AGENT
        return tuple(range(lo, lo + CUSTOMERS_PER_AGENT))

    def as_matrix(self) -> np.ndarray:
        """(12, 4) float64 matrix of <x, y, owner, is_depot> rows."""
        return np.array([loc.as_row() for loc in self.deliveries], dtype=np.float64)

    def coords(self) -> np.ndarray:
        """(12, 2) float64 coordinates."""
        return np.array([(loc.x, loc.y) for loc in self.deliveries], dtype=np.float64)


def _check_agent(agent: int) -> None:
    if agent not in (1, 2, 3):
        raise ValidationError(f"agent must be in 1..3, got {agent!r}")


def validate_rows(deliveries: tuple[Location, ...], radii: tuple[float, ...]) -> None:
    if len(radii) != N_AGENTS:
        raise ValidationError(f"expected {N_AGENTS} radii, got {len(radii)}")
    for i, r in enumerate(radii):
        if r not in SERVICE_RADII:
            raise ValidationError(f"radius for agent {i + 1} must be one of {SERVICE_RADII}, got {r!r}")
    if len(deliveries) != N_DELIVERIES:
        raise ValidationError(f"expected {N_DELIVERIES} delivery rows, got {len(deliveries)}")
    for row, loc in enumerate(deliveries):
        if loc.owner not in (1, 2, 3):
            raise ValidationError(f"row {row}: owner must be in 1..3, got {loc.owner!r}")
        if not (math.isfinite(loc.x) and math.isfinite(loc.y)):
            raise ValidationError(f"row {row}: non-finite coordinates ({loc.x!r}, {loc.y!r})")
    for agent in (1, 2, 3):
        depot = deliveries[agent - 1]
        if not depot.is_depot or depot.owner != agent:
            raise ValidationError(f"row {agent - 1}: expected the depot of agent {agent}")
        dx, dy = DEPOT_COORDS[agent - 1]
        if depot.x != dx or depot.y != dy:
            raise ValidationError(
                f"row {agent - 1}: depot of agent {agent} must sit at ({dx}, {dy}), "
                f"got ({depot.x}, {depot.y})"
            )
    for agent in (1, 2, 3):
        lo = N_AGENTS + (agent - 1) * CUSTOMERS_PER_AGENT
        for row in range(lo, lo + CUSTOMERS_PER_AGENT):
            loc = deliveries[row]
            if loc.is_depot:
                raise ValidationError(f"row {row}: expected a customer, found a depot")
            if loc.owner != agent:
                raise ValidationError(f"row {row}: customer owner must be {agent}, got {loc.owner}")
            dist = euclidean_distance(loc, deliveries[agent - 1])
            if dist > radii[agent - 1] + _CONTAINMENT_EPS:
                raise ValidationError(
                    f"row {row}: customer of agent {agent} lies {dist:.6f} from its depot, "
                    f"outside service radius {radii[agent - 1]}"
                )


def sample_point_in_disc(rng: np.random.Generator, center: tuple[float, float], radius: float) -> tuple[float, float]:
    """Uniform point in the disc: angle ~ U(0, 2*pi), radius ~ R*sqrt(U)."""
    theta = rng.uniform(0.0, 2.0 * math.pi)
    rad = radius * math.sqrt(rng.uniform(0.0, 1.0))
    return (center[0] + rad * math.cos(theta), center[1] + rad * math.sin(theta))


def generate_instance(stream: RngStream) -> Instance:
    """Draw one instance from a named stream. Same stream, same instance."""
    rng = stream.generator()
    radii = tuple(SERVICE_RADII[rng.integers(0, len(SERVICE_RADII))] for _ in range(N_AGENTS))
    rows: list[Location] = [
        Location(x, y, owner=i + 1, is_depot=True) for i, (x, y) in enumerate(DEPOT_COORDS)
    ]
    for agent in (1, 2, 3):
        center = DEPOT_COORDS[agent - 1]
        for _ in range(CUSTOMERS_PER_AGENT):
            x, y = sample_point_in_disc(rng, center, radii[agent - 1])
            rows.append(Location(x, y, owner=agent, is_depot=False))
    return Instance(deliveries=tuple(rows), radii=radii, seed=stream.fingerprint())


def generate_instances(stream: RngStream, n: int) -> list[Instance]:
    return [generate_instance(stream.child(str(i))) for i in range(n)]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def instance_to_dict(instance: Instance) -> dict:
    return {
        "seed": instance.seed,
        "radii": list(instance.radii),
        "deliveries": [
            {"x": loc.x, "y": loc.y, "owner": loc.owner, "is_depot": loc.is_depot}
            for loc in instance.deliveries
        ],
    }


def instance_from_dict(payload: dict) -> Instance:
    if not isinstance(payload, dict):
        raise ValidationError(f"instance payload must be an object, got {type(payload).__name__}")
    for key in ("seed", "radii", "deliveries"):
        if key not in payload:
            raise ValidationError(f"instance payload missing key {key!r}")
    raw_rows = payload["deliveries"]
    if not isinstance(raw_rows, list):
        raise ValidationError("'deliveries' must be a list")
    rows: list[Location] = []
    for i, raw in enumerate(raw_rows):
        if not isinstance(raw, dict):
            raise ValidationError(f"row {i}: delivery entries must be objects")
        missing = [k for k in ("x", "y", "owner", "is_depot") if k not in raw]
        if missing:
            raise ValidationError(f"row {i}: missing fields {missing}")
        if not isinstance(raw["owner"], int) or isinstance(raw["owner"], bool):
            raise ValidationError(f"row {i}: owner must be an integer, got {raw['owner']!r}")
        if not isinstance(raw["is_depot"], bool):
            raise ValidationError(f"row {i}: is_depot must be a boolean, got {raw['is_depot']!r}")
        try:
            rows.append(
                Location(float(raw["x"]), float(raw["y"]), owner=raw["owner"], is_depot=raw["is_depot"])
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"row {i}: bad coordinates: {exc}") from exc
    try:
        radii = tuple(float(r) for r in payload["radii"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad radii: {exc}") from exc
    seed = payload["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ValidationError(f"seed must be a non-negative integer, got {seed!r}")
    return Instance(deliveries=tuple(rows), radii=radii, seed=seed)  # validates rows


def write_instance(instance: Instance, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(instance_to_dict(instance), fh, indent=2)
        fh.write("\n")


def read_instance(path: str | os.PathLike) -> Instance:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    return instance_from_dict(payload)
