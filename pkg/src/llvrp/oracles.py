"""Reference solvers: exact dynamic programming at tiny sizes, simple
local-search heuristics beyond, plus the gap measure and a cost cache.

Every solver is metric-aware because it only ever consumes the
instance's distance matrix.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vrp import Instance, MetricKind, ProblemKind, Tour, make_tour

HELD_KARP_MAX = 15      # 2^n * n float table stays under 4 MB
CVRP_EXACT_MAX = 8


class SizeLimitError(ValueError):
    """Instance too large for an exact solver."""


@dataclass(frozen=True)
class OracleResult:
    tour: Tour
    cost: float
    exact: bool
    seconds: float


def gap(model_cost: float, oracle_cost: float) -> float:
    """(model - oracle) / oracle, the relative excess over the reference."""
    if oracle_cost <= 0:
        raise ValueError(f"oracle cost must be positive, got {oracle_cost}")
    return (model_cost - oracle_cost) / oracle_cost


def held_karp_matrix(dist: list[list[float]]) -> tuple[float, list[int]]:
    """Optimal closed tour over a full distance matrix (start fixed at 0)."""
    n = len(dist)
    if n == 1:
        return 0.0, [0]
    size = 1 << n
    inf = math.inf
    dp = [[inf] * n for _ in range(size)]
    parent = [[-1] * n for _ in range(size)]
    dp[1][0] = 0.0
    for mask in range(1, size):
        if not mask & 1:
            continue
        dpm = dp[mask]
        for last in range(n):
            base = dpm[last]
            if base == inf or not (mask >> last) & 1:
                continue
            row = dist[last]
            for nxt in range(1, n):
                if (mask >> nxt) & 1:
                    continue
                nmask = mask | (1 << nxt)
                cand = base + row[nxt]
                if cand < dp[nmask][nxt]:
                    dp[nmask][nxt] = cand
                    parent[nmask][nxt] = last
    full = size - 1
    best = inf
    best_last = 0
    for last in range(1, n):
        cand = dp[full][last] + dist[last][0]
        if cand < best:
            best = cand
            best_last = last
    seq: list[int] = []
    mask, last = full, best_last
    while last != -1:
        seq.append(last)
        mask, last = mask ^ (1 << last), parent[mask][last]
    seq.reverse()
    return best, seq


def held_karp(inst: Instance) -> OracleResult:
    """Exact TSP tour by subset dynamic programming, n <= 15."""
    if inst.kind != ProblemKind.TSP:
        raise ValueError("held_karp solves TSP instances; use cvrp_exact_tiny for CVRP")
    if inst.n > HELD_KARP_MAX:
        raise SizeLimitError(f"held_karp supports n <= {HELD_KARP_MAX}, got {inst.n}")
    t0 = time.perf_counter()
    cost, seq = held_karp_matrix(inst.matrix().tolist())
    tour = make_tour(seq, inst)
    return OracleResult(tour=tour, cost=tour.cost, exact=True,
                        seconds=time.perf_counter() - t0)


def cvrp_exact_tiny(inst: Instance) -> OracleResult:
    """Exact CVRP by enumerating capacity-feasible customer partitions,
    each block routed optimally; customers <= 8."""
    if inst.kind != ProblemKind.CVRP:
        raise ValueError("cvrp_exact_tiny solves CVRP instances")
    n = inst.n
    if n > CVRP_EXACT_MAX:
        raise SizeLimitError(f"cvrp_exact_tiny supports <= {CVRP_EXACT_MAX} customers, got {n}")
    t0 = time.perf_counter()
    dist = inst.matrix()
    size = 1 << n
    inf = math.inf
    demand = [0] * size
    for mask in range(1, size):
        low = mask & -mask
        demand[mask] = demand[mask ^ low] + int(inst.demands[low.bit_length()])
    route_cost = [inf] * size
    route_seq: list[list[int] | None] = [None] * size
    for mask in range(1, size):
        if demand[mask] > inst.capacity:
            continue
        nodes = [0] + [i + 1 for i in range(n) if (mask >> i) & 1]
        sub = dist[np.ix_(nodes, nodes)].tolist()
        cost, order = held_karp_matrix(sub)
        route_cost[mask] = cost
        route_seq[mask] = [nodes[k] for k in order]
    best = [inf] * size
    best[0] = 0.0
    choice = [0] * size
    for mask in range(1, size):
        low = mask & -mask
        sub = mask
        while sub:
            if sub & low and route_cost[sub] < inf:
                cand = route_cost[sub] + best[mask ^ sub]
                if cand < best[mask]:
                    best[mask] = cand
                    choice[mask] = sub
            sub = (sub - 1) & mask
    seq: list[int] = []
    mask = size - 1
    while mask:
        seq.extend(route_seq[choice[mask]])
        mask ^= choice[mask]
    tour = make_tour(seq, inst)
    return OracleResult(tour=tour, cost=tour.cost, exact=True,
                        seconds=time.perf_counter() - t0)


def nearest_neighbor(inst: Instance) -> Tour:
    """Greedy construction from node 0; distance ties break to the lowest index."""
    dist = inst.matrix()
    if inst.kind == ProblemKind.TSP:
        seq = [0]
        remaining = set(range(1, inst.n_nodes))
        while remaining:
            row = dist[seq[-1]].copy()
            row[[i for i in range(inst.n_nodes) if i not in remaining]] = np.inf
            seq.append(int(np.argmin(row)))
            remaining.discard(seq[-1])
        return make_tour(seq, inst)
    seq = [0]
    remaining = set(range(1, inst.n_nodes))
    load = 0
    while remaining:
        row = dist[seq[-1]].copy()
        blocked = [i for i in range(inst.n_nodes)
                   if i not in remaining or load + int(inst.demands[i]) > inst.capacity]
        row[blocked] = np.inf
        if np.isinf(row).all():
            seq.append(0)
            load = 0
            continue
        nxt = int(np.argmin(row))
        seq.append(nxt)
        load += int(inst.demands[nxt])
        remaining.discard(nxt)
    return make_tour(seq, inst)


def _two_opt_cycle(seq: list[int], dist: np.ndarray) -> list[int]:
    """First-improvement segment reversals on a closed tour until local optimum."""
    n = len(seq)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            a, b = seq[i], seq[(i + 1) % n]
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                c, d = seq[j], seq[(j + 1) % n]
                delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
                if delta < -1e-12:
                    seq[i + 1:j + 1] = reversed(seq[i + 1:j + 1])
                    improved = True
                    a, b = seq[i], seq[i + 1]
    return seq


def two_opt(tour: Tour | list[int], inst: Instance) -> Tour:
    """2-opt local search; never increases cost.  For CVRP the exchanges
    stay within routes, so feasibility is preserved."""
    seq = list(tour.sequence if isinstance(tour, Tour) else tour)
    dist = inst.matrix()
    if inst.kind == ProblemKind.TSP:
        return make_tour(_two_opt_cycle(seq, dist), inst)
    routes: list[list[int]] = []
    for v in seq:
        if v == 0:
            routes.append([0])
        else:
            routes[-1].append(v)
    out: list[int] = []
    for route in routes:
        if len(route) > 3:
            route = _two_opt_cycle(route, dist)
            pivot = route.index(0)
            route = route[pivot:] + route[:pivot]
        out.extend(route)
    return make_tour(out, inst)


def cvrp_sweep(inst: Instance) -> Tour:
    """Polar-angle sweep around the depot: fill routes to capacity in
    angular order, then 2-opt each route."""
    depot = inst.coords[0]
    angles = np.arctan2(inst.coords[1:, 1] - depot[1], inst.coords[1:, 0] - depot[0])
    order = np.argsort(angles, kind="stable") + 1
    seq: list[int] = [0]
    load = 0
    for c in order:
        d = int(inst.demands[c])
        if load + d > inst.capacity:
            seq.append(0)
            load = 0
        seq.append(int(c))
        load += d
    return two_opt(seq, inst)


def reference_solve(inst: Instance) -> OracleResult:
    """Best reference available: exact DP at tiny sizes, local search beyond."""
    if inst.kind == ProblemKind.TSP:
        if inst.n <= HELD_KARP_MAX:
            return held_karp(inst)
        t0 = time.perf_counter()
        tour = two_opt(nearest_neighbor(inst), inst)
        return OracleResult(tour=tour, cost=tour.cost, exact=False,
                            seconds=time.perf_counter() - t0)
    if inst.n <= CVRP_EXACT_MAX:
        return cvrp_exact_tiny(inst)
    t0 = time.perf_counter()
    tour = cvrp_sweep(inst)
    return OracleResult(tour=tour, cost=tour.cost, exact=False,
                        seconds=time.perf_counter() - t0)


class OracleCache:
    """Reference costs keyed by (instance content hash, metric).

    Validation sets are fixed, so each instance is solved once and the
    costs are reusable across epochs, runs, and processes.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._costs: dict[str, dict] = {}
        if self.path is not None and self.path.exists():
            self._costs = json.loads(self.path.read_text())

    @staticmethod
    def key(inst: Instance) -> str:
        return f"{inst.content_hash()}:{inst.metric.value}"

    def cost(self, inst: Instance) -> tuple[float, bool]:
        """Cached (cost, exact) pair, solving and storing on a miss."""
        k = self.key(inst)
        hit = self._costs.get(k)
        if hit is None:
            res = reference_solve(inst)
            hit = {"cost": res.cost, "exact": res.exact}
            self._costs[k] = hit
        return float(hit["cost"]), bool(hit["exact"])

    def save(self) -> None:
        if self.path is not None:
            self.path.write_text(json.dumps(self._costs, sort_keys=True))
