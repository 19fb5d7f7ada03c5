"""Problem definitions: distance metrics, instances, and the construction MDP.

Instances are immutable once built.  Rollout state is a small value
object confined to one rollout; `step` returns a fresh state so the
scalar path stays side-effect free.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class FeasibilityError(ValueError):
    """A tour violating a problem constraint, with the constraint named."""


class ProblemKind(str, Enum):
    TSP = "tsp"
    CVRP = "cvrp"


class MetricKind(str, Enum):
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"
    CHEBYSHEV = "chebyshev"
    # min/mean variants of the coordinate-wise absolute differences.
    # chebyshev_min is a degenerate pseudo-metric: it is 0 whenever one
    # coordinate matches, even for distinct points.
    CHEBYSHEV_MIN = "chebyshev_min"
    CHEBYSHEV_MEAN = "chebyshev_mean"


def stable_seed(*parts) -> int:
    """64-bit seed derived from the parts, stable across runs and platforms."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def distance(metric: MetricKind, a: Sequence[float], b: Sequence[float]) -> float:
    dx = abs(a[0] - b[0])
    dy = abs(a[1] - b[1])
    if metric == MetricKind.EUCLIDEAN:
        return math.hypot(dx, dy)
    if metric == MetricKind.MANHATTAN:
        return dx + dy
    if metric == MetricKind.CHEBYSHEV:
        return max(dx, dy)
    if metric == MetricKind.CHEBYSHEV_MIN:
        return min(dx, dy)
    if metric == MetricKind.CHEBYSHEV_MEAN:
        return (dx + dy) / 2.0
    raise ValueError(f"unknown metric {metric!r}")


def distance_matrix(metric: MetricKind, coords: np.ndarray) -> np.ndarray:
    """Full pairwise matrix for the given metric; coords is (m, 2)."""
    coords = np.asarray(coords, dtype=np.float64)
    dx = np.abs(coords[:, None, 0] - coords[None, :, 0])
    dy = np.abs(coords[:, None, 1] - coords[None, :, 1])
    if metric == MetricKind.EUCLIDEAN:
        return np.hypot(dx, dy)
    if metric == MetricKind.MANHATTAN:
        return dx + dy
    if metric == MetricKind.CHEBYSHEV:
        return np.maximum(dx, dy)
    if metric == MetricKind.CHEBYSHEV_MIN:
        return np.minimum(dx, dy)
    if metric == MetricKind.CHEBYSHEV_MEAN:
        return (dx + dy) / 2.0
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class Instance:
    """One TSP or CVRP problem.

    `coords` holds every node; for CVRP the depot is row 0 and `n`
    counts customers only.  Demands are raw integers; the network sees
    them normalized by capacity.
    """

    kind: ProblemKind
    coords: np.ndarray
    metric: MetricKind
    demands: np.ndarray | None = None
    capacity: int | None = None
    seed: int | None = None

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.kind == ProblemKind.CVRP:
            if self.demands is None or self.capacity is None:
                raise ValueError("CVRP instances need demands and capacity")
            demands = np.ascontiguousarray(self.demands, dtype=np.int64)
            demands.setflags(write=False)
            object.__setattr__(self, "demands", demands)
            if demands.shape != (coords.shape[0],):
                raise ValueError("demands length must match coords")
            if demands[0] != 0:
                raise ValueError("depot demand must be 0")
            if len(demands) > 1 and (demands[1:] < 1).any():
                raise ValueError("customer demands must be >= 1")
            if demands.max(initial=0) > self.capacity:
                raise ValueError("a demand exceeds the vehicle capacity")

    @property
    def n(self) -> int:
        """Problem size: node count for TSP, customer count for CVRP."""
        if self.kind == ProblemKind.TSP:
            return self.coords.shape[0]
        return self.coords.shape[0] - 1

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    def matrix(self) -> np.ndarray:
        return distance_matrix(self.metric, self.coords)

    def with_metric(self, metric: MetricKind) -> "Instance":
        return replace(self, metric=metric)

    def content_hash(self) -> str:
        """Hash of the problem content (metric excluded; used as a cache key)."""
        h = hashlib.sha256()
        h.update(self.kind.value.encode())
        h.update(self.coords.tobytes())
        if self.kind == ProblemKind.CVRP:
            h.update(self.demands.tobytes())
            h.update(str(self.capacity).encode())
        return h.hexdigest()[:24]


@dataclass(frozen=True)
class Tour:
    """Ordered node sequence with its cost under the instance metric."""

    sequence: tuple[int, ...]
    cost: float


@dataclass(frozen=True)
class RolloutState:
    """Partial construction state for one rollout."""

    sequence: tuple[int, ...]
    visited: frozenset[int]
    current: int
    start: int
    remaining: int | None = None  # CVRP capacity left; None for TSP


def nint(x: float) -> int:
    """Round half up, the TSPLIB convention."""
    return math.floor(x + 0.5)


def capacity_for(n: int) -> int:
    """Vehicle capacity as a function of customer count.

    Anchors: Q=30 at n<=20, Q=35 at n=40, Q=30+n/5 for n>=50 (so Q=40 at
    n=50).  Gaps are bridged by linear interpolation rounded half up:

        n   <=20  25  30  35  40  45  50  60  80  100  200
        Q     30  31  33  34  35  38  40  42  46   50   70
    """
    if n <= 20:
        return 30
    if n <= 40:
        return nint(30 + (n - 20) * 5 / 20)
    if n < 50:
        return nint(35 + (n - 40) * 5 / 10)
    return nint(30 + n / 5)


def generate_instance(kind: ProblemKind, n: int, metric: MetricKind, seed: int) -> Instance:
    """Uniform-[0,1]^2 instance, deterministic for a fixed seed.

    The generator is counter-based (Philox keyed by the seed), so
    instance streams stay reproducible regardless of batching.
    """
    kind = ProblemKind(kind)
    metric = MetricKind(metric)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    if kind == ProblemKind.TSP:
        if n < 2:
            raise ValueError(f"TSP needs n >= 2, got {n}")
        coords = rng.random((n, 2))
        return Instance(kind=kind, coords=coords, metric=metric, seed=seed)
    if n < 1:
        raise ValueError(f"CVRP needs >= 1 customer, got {n}")
    coords = rng.random((n + 1, 2))
    demands = np.concatenate([[0], rng.integers(1, 10, size=n)])
    return Instance(kind=kind, coords=coords, metric=metric,
                    demands=demands, capacity=capacity_for(n), seed=seed)


def instance_seeds(base_seed: int, count: int) -> list[int]:
    """Per-instance seeds for a stream rooted at base_seed."""
    return [stable_seed(base_seed, i) for i in range(count)]


# ---------------------------------------------------------------------------
# construction MDP
# ---------------------------------------------------------------------------

def initial_state(inst: Instance, start: int) -> RolloutState:
    """Fresh rollout state; TSP rollouts begin on their designated start node,
    CVRP rollouts begin at the depot with `start` naming the forced first
    customer."""
    if inst.kind == ProblemKind.TSP:
        if not 0 <= start < inst.n:
            raise ValueError(f"start node {start} out of range for n={inst.n}")
        return RolloutState(sequence=(start,), visited=frozenset({start}),
                            current=start, start=start)
    if not 1 <= start <= inst.n:
        raise ValueError(f"start customer {start} out of range for n={inst.n}")
    return RolloutState(sequence=(0,), visited=frozenset(), current=0,
                        start=start, remaining=int(inst.capacity))


def valid_actions(state: RolloutState, inst: Instance) -> np.ndarray:
    """Boolean mask over nodes, True = selectable now.

    TSP: unvisited nodes.  CVRP: unvisited customers whose demand fits
    the remaining capacity, plus the depot unless the vehicle is already
    there with at least one serviceable customer left.
    """
    m = inst.n_nodes
    mask = np.zeros(m, dtype=bool)
    if inst.kind == ProblemKind.TSP:
        for i in range(m):
            mask[i] = i not in state.visited
        if state.visited != frozenset(range(m)) and not mask.any():
            raise FeasibilityError("TSP state has unvisited nodes but no valid action")
        return mask
    serviceable = False
    for i in range(1, m):
        ok = i not in state.visited and inst.demands[i] <= state.remaining
        mask[i] = ok
        serviceable = serviceable or ok
    mask[0] = not (state.current == 0 and serviceable)
    return mask


def step(state: RolloutState, action: int, inst: Instance) -> RolloutState:
    """Apply one action; returning to the depot refills capacity."""
    mask = valid_actions(state, inst)
    if not mask[action]:
        raise FeasibilityError(
            f"action {action} not allowed in state {state} (mask {mask.tolist()})")
    seq = state.sequence + (action,)
    if inst.kind == ProblemKind.TSP:
        return RolloutState(sequence=seq, visited=state.visited | {action},
                            current=action, start=state.start)
    if action == 0:
        return RolloutState(sequence=seq, visited=state.visited, current=0,
                            start=state.start, remaining=int(inst.capacity))
    return RolloutState(sequence=seq, visited=state.visited | {action},
                        current=action, start=state.start,
                        remaining=state.remaining - int(inst.demands[action]))


def is_complete(state: RolloutState, inst: Instance) -> bool:
    if inst.kind == ProblemKind.TSP:
        return len(state.visited) == inst.n_nodes
    return len(state.visited) == inst.n


def check_feasible(sequence: Sequence[int], inst: Instance) -> None:
    """Raise FeasibilityError naming the violated constraint, if any."""
    seq = list(sequence)
    m = inst.n_nodes
    if any(not 0 <= v < m for v in seq):
        raise FeasibilityError(f"node index out of range in {seq}")
    if inst.kind == ProblemKind.TSP:
        if sorted(seq) != list(range(m)):
            raise FeasibilityError("TSP tour is not a permutation of all nodes")
        return
    customers = [v for v in seq if v != 0]
    if sorted(customers) != list(range(1, m)):
        raise FeasibilityError("CVRP tour must visit every customer exactly once")
    if seq[0] != 0:
        raise FeasibilityError("CVRP tour must start at the depot")
    load = 0
    for v in seq[1:]:
        if v == 0:
            load = 0
        else:
            load += int(inst.demands[v])
            if load > inst.capacity:
                raise FeasibilityError(f"route load {load} exceeds capacity {inst.capacity}")


def sequence_cost(sequence: Sequence[int], inst: Instance) -> float:
    """Closed-loop cost of a node sequence (no feasibility check)."""
    seq = np.asarray(sequence, dtype=np.intp)
    coords = inst.coords
    nxt = np.roll(seq, -1)
    dx = np.abs(coords[seq, 0] - coords[nxt, 0])
    dy = np.abs(coords[seq, 1] - coords[nxt, 1])
    if inst.metric == MetricKind.EUCLIDEAN:
        edges = np.hypot(dx, dy)
    elif inst.metric == MetricKind.MANHATTAN:
        edges = dx + dy
    elif inst.metric == MetricKind.CHEBYSHEV:
        edges = np.maximum(dx, dy)
    elif inst.metric == MetricKind.CHEBYSHEV_MIN:
        edges = np.minimum(dx, dy)
    elif inst.metric == MetricKind.CHEBYSHEV_MEAN:
        edges = (dx + dy) / 2.0
    else:
        raise ValueError(f"unknown metric {inst.metric!r}")
    return float(edges.sum())


def tour_cost(tour: Tour | Sequence[int], inst: Instance) -> float:
    """Feasibility-checked total edge weight, closing edge included."""
    seq = tour.sequence if isinstance(tour, Tour) else tuple(tour)
    check_feasible(seq, inst)
    return sequence_cost(seq, inst)


def make_tour(sequence: Sequence[int], inst: Instance) -> Tour:
    seq = tuple(int(v) for v in sequence)
    return Tour(sequence=seq, cost=tour_cost(seq, inst))


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def instance_to_json(inst: Instance) -> str:
    """Canonical JSON: fixed field order, 17-significant-digit floats."""
    coords = ",".join(f"[{_fmt(x)},{_fmt(y)}]" for x, y in inst.coords)
    parts = [f'"kind":"{inst.kind.value}"',
             f'"n":{inst.n}',
             f'"metric":"{inst.metric.value}"',
             f'"coords":[{coords}]']
    if inst.kind == ProblemKind.CVRP:
        parts.append(f'"demands":[{",".join(str(int(d)) for d in inst.demands)}]')
        parts.append(f'"capacity":{int(inst.capacity)}')
    seed = "null" if inst.seed is None else str(int(inst.seed))
    parts.append(f'"seed":{seed}')
    return "{" + ",".join(parts) + "}\n"


def instance_from_json(text: str) -> Instance:
    obj = json.loads(text)
    kind = ProblemKind(obj["kind"])
    coords = np.asarray(obj["coords"], dtype=np.float64)
    expected = obj["n"] + (1 if kind == ProblemKind.CVRP else 0)
    if coords.shape[0] != expected:
        raise ValueError(f"coords length {coords.shape[0]} does not match n={obj['n']}")
    return Instance(kind=kind, coords=coords, metric=MetricKind(obj["metric"]),
                    demands=np.asarray(obj["demands"], dtype=np.int64) if kind == ProblemKind.CVRP else None,
                    capacity=obj.get("capacity"),
                    seed=obj.get("seed"))
