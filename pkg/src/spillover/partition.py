"""Balanced macro-county partitions via minimum k-cut.

The county graph weights each adjacent pair by the efficacy the two counties
lose when separated (normalized spillover in both directions), so the
partition minimizing the cut maximizes the average macro-county efficacy.
The solver is an in-repo multilevel heuristic (heavy-edge matching, greedy
seeded initialization, boundary refinement under the balance cap) with a
brute-force oracle for small instances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .counterfactual import PURPLE, RED, CounterfactualEngine, macro_county

log = logging.getLogger(__name__)


class DegenerateEdgeError(RuntimeError):
    """A county pair whose efficacy denominator is not positive."""


@dataclass
class CountyGraph:
    """Symmetric non-negative spillover weights on adjacent county pairs.

    `raw_weights` keeps the unclamped values (a negative weight means an
    estimated tier effect below one); `weights` is what partitioning uses."""

    county_ids: list[str]
    weights: np.ndarray
    raw_weights: np.ndarray
    clamped_edges: list[tuple[str, str, float]] = field(default_factory=list)
    degenerate_edges: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.county_ids)

    def total_weight(self) -> float:
        return float(self.weights.sum() / 2.0)

    def to_csv_rows(self) -> list[dict]:
        rows = []
        for a in range(self.n):
            for b in range(a + 1, self.n):
                if self.raw_weights[a, b] != 0.0:
                    rows.append({"county_a": self.county_ids[a],
                                 "county_b": self.county_ids[b],
                                 "weight": float(self.weights[a, b]),
                                 "raw_weight": float(self.raw_weights[a, b])})
        return rows


def build_county_graph(engine: CounterfactualEngine,
                       allow_degenerate: bool = False) -> CountyGraph:
    """Edge weight: spillover gain from separating A and B, both directions,
    each normalized by that county's full-shutdown contrast. Negative
    computed weights are clamped to zero (logged); non-positive denominators
    abort unless allowed, in which case the edge is dropped and reported."""
    ds = engine.dataset
    n = ds.n_counties
    raw = np.zeros((n, n))
    clamped, degenerate = [], []
    denom = np.array([engine.shutdown_contrast(a) for a in range(n)])
    for a, b in sorted(ds.adjacency):
        if denom[a] <= 0 or denom[b] <= 0:
            if not allow_degenerate:
                raise DegenerateEdgeError(
                    f"non-positive shutdown contrast on edge "
                    f"{ds.counties[a].id}-{ds.counties[b].id}")
            degenerate.append((ds.counties[a].id, ds.counties[b].id))
            continue
        w = ((engine.expected_cross(a, b, PURPLE, RED)
              - engine.expected_cross(a, b, PURPLE, PURPLE)) / denom[a]
             + (engine.expected_cross(b, a, PURPLE, RED)
                - engine.expected_cross(b, a, PURPLE, PURPLE)) / denom[b])
        raw[a, b] = raw[b, a] = w
    weights = np.maximum(raw, 0.0)
    for a, b in sorted(ds.adjacency):
        if raw[a, b] < 0:
            clamped.append((ds.counties[a].id, ds.counties[b].id,
                            float(raw[a, b])))
    if clamped:
        log.warning("clamped %d negative county-graph edges to zero", len(clamped))
    return CountyGraph([c.id for c in ds.counties], weights, raw,
                       clamped, degenerate)


@dataclass
class CountyPartition:
    county_ids: list[str]
    assignment: np.ndarray
    k: int
    epsilon: float
    cut_weight: float
    avg_r_m: float | None = None
    per_county_r_m: dict[str, float] | None = None
    max_part_size: int = 0

    def to_jsonable(self) -> dict:
        return {"assignment": {c: int(p) for c, p in
                               zip(self.county_ids, self.assignment)},
                "k": self.k, "epsilon": self.epsilon,
                "cut_weight": self.cut_weight,
                "avg_r_m": self.avg_r_m,
                "per_county_r_m": self.per_county_r_m,
                "max_part_size": self.max_part_size}


def balance_cap(n: int, k: int, epsilon: float) -> int:
    """Maximum part size ceil((1 + eps) * n / k)."""
    return math.ceil((1.0 + epsilon) * n / k)


def cut_weight(weights: np.ndarray, assignment: np.ndarray) -> float:
    """Total weight of edges crossing parts."""
    diff = assignment[:, None] != assignment[None, :]
    return float((weights * diff).sum() / 2.0)


def canonical_assignment(assignment: np.ndarray) -> np.ndarray:
    """Relabel parts by first occurrence so equal partitions compare equal."""
    mapping: dict[int, int] = {}
    out = np.empty_like(assignment)
    for i, p in enumerate(assignment):
        if p not in mapping:
            mapping[p] = len(mapping)
        out[i] = mapping[p]
    return out


def _check_feasible(n: int, k: int, epsilon: float) -> int:
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    cap = balance_cap(n, k, epsilon)
    if k * cap < n:
        raise ValueError(f"infeasible balance: k={k}, cap={cap}, n={n}")
    return cap


def random_balanced_partition(n: int, k: int, seed: int = 0) -> np.ndarray:
    """Uniformly random assignment into parts of size floor(n/k) or
    ceil(n/k) (the baseline comparator)."""
    _check_feasible(n, k, 0.05)
    perm = rng.generator(seed, 71).permutation(n)
    sizes = [n // k + (1 if p < n % k else 0) for p in range(k)]
    assignment = np.empty(n, dtype=int)
    at = 0
    for p, size in enumerate(sizes):
        assignment[perm[at:at + size]] = p
        at += size
    return canonical_assignment(assignment)


# -- multilevel heuristic ----------------------------------------------------------


def _heavy_edge_matching(w: np.ndarray, node_w: np.ndarray, cap: int,
                         order: np.ndarray):
    """Greedy matching of each node to its heaviest unmatched neighbor whose
    merged weight stays under the cap. Returns the coarse-node map."""
    n = len(node_w)
    match = np.full(n, -1)
    for v in order:
        if match[v] >= 0:
            continue
        nbrs = np.flatnonzero(w[v] > 0)
        best, best_w = -1, 0.0
        for u in nbrs:
            if u == v or match[u] >= 0:
                continue
            if node_w[v] + node_w[u] > cap:
                continue
            if w[v, u] > best_w:
                best, best_w = u, w[v, u]
        if best >= 0:
            match[v] = best
            match[best] = v
    coarse = np.full(n, -1)
    nxt = 0
    for v in range(n):
        if coarse[v] >= 0:
            continue
        coarse[v] = nxt
        if match[v] >= 0:
            coarse[match[v]] = nxt
        nxt += 1
    return coarse, nxt


def _contract(w: np.ndarray, node_w: np.ndarray, coarse: np.ndarray, m: int):
    cw = np.zeros((m, m))
    cnw = np.zeros(m, dtype=int)
    np.add.at(cnw, coarse, node_w)
    for a in range(len(node_w)):
        ca = coarse[a]
        for b in range(a + 1, len(node_w)):
            if w[a, b] > 0 and ca != coarse[b]:
                cw[ca, coarse[b]] += w[a, b]
                cw[coarse[b], ca] += w[a, b]
    return cw, cnw


def _greedy_initial(w: np.ndarray, node_w: np.ndarray, k: int, cap: int,
                    g: np.random.Generator) -> np.ndarray:
    """Seed k parts on distinct nodes, then attach the rest to the part they
    connect to most, under the cap; falls back to the lightest part."""
    n = len(node_w)
    assignment = np.full(n, -1)
    sizes = np.zeros(k, dtype=int)
    order = g.permutation(n)
    heavy_first = order[np.argsort(-node_w[order], kind="stable")]
    for p, v in enumerate(heavy_first[:k]):
        assignment[v] = p
        sizes[p] = node_w[v]
    for v in heavy_first[k:]:
        conn = np.zeros(k)
        for u in np.flatnonzero(w[v] > 0):
            if assignment[u] >= 0:
                conn[assignment[u]] += w[v, u]
        feasible = sizes + node_w[v] <= cap
        if feasible.any():
            conn_masked = np.where(feasible, conn, -np.inf)
            best = int(np.argmax(conn_masked - 1e-12 * sizes))
        else:
            best = int(np.argmin(sizes))
        assignment[v] = best
        sizes[best] += node_w[v]
    return assignment


def _refine(w: np.ndarray, node_w: np.ndarray, assignment: np.ndarray, k: int,
            cap: int, g: np.random.Generator, passes: int = 10) -> None:
    """Boundary moves with positive cut gain, respecting the cap and keeping
    every part non-empty. In place."""
    n = len(node_w)
    sizes = np.zeros(k, dtype=int)
    np.add.at(sizes, assignment, node_w)
    counts = np.bincount(assignment, minlength=k)
    for _ in range(passes):
        moved = False
        for v in g.permutation(n):
            p = assignment[v]
            if counts[p] <= 1:
                continue
            conn = np.zeros(k)
            for u in np.flatnonzero(w[v] > 0):
                conn[assignment[u]] += w[v, u]
            gains = conn - conn[p]
            gains[p] = -np.inf
            gains[sizes + node_w[v] > cap] = -np.inf
            q = int(np.argmax(gains))
            if gains[q] > 1e-12:
                assignment[v] = q
                sizes[p] -= node_w[v]
                sizes[q] += node_w[v]
                counts[p] -= 1
                counts[q] += 1
                moved = True
        if not moved:
            break


def _repair_balance(w: np.ndarray, node_w: np.ndarray, assignment: np.ndarray,
                    k: int, cap: int, g: np.random.Generator) -> bool:
    """Move nodes out of over-cap parts, best connection first."""
    sizes = np.zeros(k, dtype=int)
    np.add.at(sizes, assignment, node_w)
    counts = np.bincount(assignment, minlength=k)
    for _ in range(10 * len(node_w)):
        over = np.flatnonzero(sizes > cap)
        if not over.size:
            return True
        p = int(over[0])
        movable = np.flatnonzero(assignment == p)
        best_move, best_gain = None, -np.inf
        for v in movable:
            if counts[p] <= 1:
                break
            conn = np.zeros(k)
            for u in np.flatnonzero(w[v] > 0):
                conn[assignment[u]] += w[v, u]
            for q in range(k):
                if q == p or sizes[q] + node_w[v] > cap:
                    continue
                gain = conn[q] - conn[p]
                if gain > best_gain:
                    best_gain, best_move = gain, (v, q)
        if best_move is None:
            return False
        v, q = best_move
        assignment[v] = q
        sizes[p] -= node_w[v]
        sizes[q] += node_w[v]
        counts[p] -= 1
        counts[q] += 1
    return bool((sizes <= cap).all())


def _multilevel_once(w: np.ndarray, k: int, cap: int, seed: int) -> np.ndarray:
    g = np.random.default_rng(seed)
    n0 = len(w)
    levels = []                      # (weights, node weights, coarse map)
    cur_w, cur_nw = w.copy(), np.ones(n0, dtype=int)
    while len(cur_nw) > max(3 * k, 12):
        coarse, m = _heavy_edge_matching(cur_w, cur_nw, cap,
                                         g.permutation(len(cur_nw)))
        if m == len(cur_nw):
            break
        levels.append((cur_w, cur_nw, coarse))
        cur_w, cur_nw = _contract(cur_w, cur_nw, coarse, m)
    assignment = _greedy_initial(cur_w, cur_nw, k, cap, g)
    _repair_balance(cur_w, cur_nw, assignment, k, cap, g)
    _refine(cur_w, cur_nw, assignment, k, cap, g)
    for lvl_w, lvl_nw, coarse in reversed(levels):
        assignment = assignment[coarse]
        _refine(lvl_w, lvl_nw, assignment, k, cap, g)
    return assignment


def min_kcut(graph: CountyGraph, k: int, epsilon: float = 0.05, seed: int = 0,
             restarts: int = 16) -> CountyPartition:
    """Approximate balanced minimum k-cut: best of `restarts` seeded
    multilevel runs; deterministic given the seed."""
    n = graph.n
    cap = _check_feasible(n, k, epsilon)
    if k == 1:
        assignment = np.zeros(n, dtype=int)
        return CountyPartition(graph.county_ids, assignment, k, epsilon, 0.0,
                               max_part_size=n)
    if k == n:
        assignment = np.arange(n)
        return CountyPartition(graph.county_ids, assignment, k, epsilon,
                               graph.total_weight(), max_part_size=1)
    best = None
    for r in range(restarts):
        assignment = _multilevel_once(graph.weights, k, cap,
                                      rng.derive_seed(seed, r))
        counts = np.bincount(assignment, minlength=k)
        if (counts == 0).any() or not (counts <= cap).all():
            continue
        cut = cut_weight(graph.weights, assignment)
        canon = tuple(canonical_assignment(assignment))
        if best is None or (cut, canon) < best[:2]:
            best = (cut, canon, assignment.copy())
    if best is None:
        raise RuntimeError("no feasible partition found; relax epsilon")
    cut, canon, assignment = best
    assignment = canonical_assignment(assignment)
    return CountyPartition(graph.county_ids, assignment, k, epsilon, cut,
                           max_part_size=int(np.bincount(assignment).max()))


def brute_force_kcut(graph: CountyGraph, k: int,
                     epsilon: float = 0.05) -> CountyPartition:
    """Exhaustive optimum over partitions into exactly k non-empty parts
    under the cap (restricted-growth enumeration, n <= 12). Ties break to
    the lexicographically smallest part-id vector."""
    n = graph.n
    if n > 12:
        raise ValueError("brute force limited to 12 nodes")
    cap = _check_feasible(n, k, epsilon)
    w = graph.weights
    assignment = np.zeros(n, dtype=int)
    sizes = np.zeros(k, dtype=int)
    best: tuple[float, tuple] | None = None

    def rec(i: int, used: int, cut: float) -> None:
        nonlocal best
        if best is not None and cut > best[0]:
            return
        if n - i < k - used:
            return
        if i == n:
            if used == k:
                cand = (cut, tuple(assignment))
                if best is None or cand < best:
                    best = cand
            return
        for p in range(min(used + 1, k)):
            if sizes[p] + 1 > cap:
                continue
            added = float(w[i, :i][assignment[:i] != p].sum())
            assignment[i] = p
            sizes[p] += 1
            rec(i + 1, used + (1 if p == used else 0), cut + added)
            sizes[p] -= 1
    rec(0, 0, 0.0)
    if best is None:
        raise RuntimeError("no feasible partition under the balance cap")
    cut, vec = best
    assignment = np.array(vec)
    return CountyPartition(graph.county_ids, assignment, k, epsilon, cut,
                           max_part_size=int(np.bincount(assignment).max()))


def evaluate_partition(partition: CountyPartition | np.ndarray,
                       engine: CounterfactualEngine,
                       graph: CountyGraph) -> CountyPartition:
    """Attach macro-county efficacy to a partition: per-county r_M, their
    average over defined counties, and the cut weight on `graph`."""
    assignment = (partition.assignment if isinstance(partition, CountyPartition)
                  else np.asarray(partition))
    k = int(assignment.max()) + 1
    eps = partition.epsilon if isinstance(partition, CountyPartition) else 0.05
    ds = engine.dataset
    per = {}
    values = []
    for a in range(ds.n_counties):
        r = engine.efficacy_ratio(a, macro_county(assignment, a))
        if r is not None:
            per[ds.counties[a].id] = r
            values.append(r)
    return CountyPartition(
        graph.county_ids, assignment, k, eps,
        cut_weight(graph.weights, assignment),
        avg_r_m=float(np.mean(values)) if values else None,
        per_county_r_m=per,
        max_part_size=int(np.bincount(assignment).max()))


def tradeoff_curve(graph: CountyGraph, engines: list[CounterfactualEngine],
                   ks: list[int], epsilon: float = 0.05,
                   seed: int = 0) -> list[dict]:
    """One optimized partition per k, with efficacy CIs across engines."""
    rows = []
    for k in ks:
        part = min_kcut(graph, k, epsilon, seed)
        avgs = []
        for eng in engines:
            ev = evaluate_partition(part, eng, graph)
            if ev.avg_r_m is not None:
                avgs.append(ev.avg_r_m)
        avgs = np.array(avgs)
        m = float(avgs.mean()) if avgs.size else float("nan")
        s = float(avgs.std(ddof=1)) if avgs.size > 1 else 0.0
        rows.append({"k": k, "avg_part_size": graph.n / k,
                     "cut_weight": part.cut_weight,
                     "avg_rm_mean": m, "avg_rm_lo": m - 1.96 * s,
                     "avg_rm_hi": m + 1.96 * s,
                     "max_part_size": part.max_part_size})
    return rows
