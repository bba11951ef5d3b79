"""Bond perception, valence-based validity, and canonical isomer keys.

Bonds are perceived from covalent-radius distance cutoffs; validity means
the perceived graph is one connected component and admits an integer
bond-order assignment meeting every atom's target valence exactly. Isomer
identity ignores bond orders: two molecules are the same isomer iff their
element-labeled connectivity graphs are isomorphic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .chem import Canvas, Element

__all__ = [
    "MolecularGraph",
    "CanonicalKey",
    "perceive_bonds",
    "assign_bond_orders",
    "is_valid",
    "canonical_key",
    "BOND_SCALE_DEFAULT",
    "MAX_BOND_ORDER",
]

BOND_SCALE_DEFAULT = 1.2
MAX_BOND_ORDER = 3

KEY_VERSION = "v1"


@dataclass(frozen=True)
class MolecularGraph:
    nodes: tuple[Element, ...]
    edges: frozenset[tuple[int, int]]  # each pair stored as (min, max)
    bond_orders: dict[tuple[int, int], int] | None = None

    def __post_init__(self):
        n = len(self.nodes)
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop on atom {i}")
            if not (0 <= i < j < n):
                raise ValueError(f"bad edge ({i}, {j}) for {n} nodes")
        if self.bond_orders is not None:
            for e, order in self.bond_orders.items():
                if e not in self.edges or order < 1:
                    raise ValueError(f"bad bond order {order} on edge {e}")

    @property
    def n_atoms(self) -> int:
        return len(self.nodes)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.nodes]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def degree(self, i: int) -> int:
        return sum(1 for e in self.edges if i in e)


@dataclass(frozen=True)
class CanonicalKey:
    key: str

    def __str__(self):
        return self.key


def perceive_bonds(canvas: Canvas, scale: float = BOND_SCALE_DEFAULT) -> MolecularGraph:
    """Edge (i, j) iff dist(i, j) < scale * (r_cov_i + r_cov_j)."""
    if len(canvas) == 0:
        raise ValueError("cannot perceive bonds on an empty canvas")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    n = len(canvas)
    radii = np.array([el.covalent_radius for el in canvas.elements])
    diff = canvas.positions[:, None, :] - canvas.positions[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    cutoff = scale * (radii[:, None] + radii[None, :])
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] < cutoff[i, j]:
                edges.add((i, j))
    return MolecularGraph(tuple(canvas.elements), frozenset(edges))


def assign_bond_orders(graph: MolecularGraph) -> MolecularGraph | None:
    """Find integer bond orders with sum(orders at atom) == target valence.

    Backtracking over edges in index order, orders tried 1..3. Returns None
    when no assignment exists (the graph is valence-unsatisfiable).
    """
    edges = sorted(graph.edges)
    residual = [el.target_valence for el in graph.nodes]
    # remaining capacity pruning: how much order can edges not yet assigned
    # still contribute to each atom
    remaining = [0] * graph.n_atoms
    for i, j in edges:
        remaining[i] += MAX_BOND_ORDER
        remaining[j] += MAX_BOND_ORDER

    orders: dict[tuple[int, int], int] = {}

    def feasible(atom: int) -> bool:
        return 0 <= residual[atom] <= remaining[atom]

    def rec(k: int) -> bool:
        if k == len(edges):
            return all(r == 0 for r in residual)
        i, j = edges[k]
        remaining[i] -= MAX_BOND_ORDER
        remaining[j] -= MAX_BOND_ORDER
        for order in range(1, MAX_BOND_ORDER + 1):
            if order > residual[i] or order > residual[j]:
                break
            residual[i] -= order
            residual[j] -= order
            if feasible(i) and feasible(j) and rec(k + 1):
                orders[(i, j)] = order
                residual[i] += order
                residual[j] += order
                remaining[i] += MAX_BOND_ORDER
                remaining[j] += MAX_BOND_ORDER
                return True
            residual[i] += order
            residual[j] += order
        remaining[i] += MAX_BOND_ORDER
        remaining[j] += MAX_BOND_ORDER
        return False

    if not rec(0):
        return None
    return MolecularGraph(graph.nodes, graph.edges, dict(orders))


def _connected(graph: MolecularGraph) -> bool:
    n = graph.n_atoms
    if n == 0:
        return False
    adj = graph.neighbors()
    seen = [False] * n
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if not seen[w]:
                seen[w] = True
                count += 1
                stack.append(w)
    return count == n


def is_valid(canvas: Canvas, scale: float = BOND_SCALE_DEFAULT) -> bool:
    """Single connected component + exact valence satisfiability.

    A 1-atom canvas is always invalid: no element in the vocabulary has
    target valence 0, so an isolated atom can never satisfy its valence.
    """
    if len(canvas) == 0:
        return False
    graph = perceive_bonds(canvas, scale)
    return graph_is_valid(graph)


def graph_is_valid(graph: MolecularGraph) -> bool:
    if not _connected(graph):
        return False
    return assign_bond_orders(graph) is not None


# --- canonical keys -------------------------------------------------------
#
# Iterative color refinement from element labels, then an
# individualization-refinement search over the non-singleton cells for the
# lexicographically minimal adjacency encoding. Automorphisms discovered
# when two complete labelings collide are used to prune symmetric branches
# (orbit pruning), which keeps hydrogen-rich molecules cheap.


def _refine(adj: list[list[int]], colors: list[int]) -> list[int]:
    n = len(colors)
    while True:
        profiles = [
            (colors[v], tuple(sorted(colors[w] for w in adj[v]))) for v in range(n)
        ]
        mapping: dict[tuple, int] = {}
        for p in sorted(set(profiles)):
            mapping[p] = len(mapping)
        new_colors = [mapping[profiles[v]] for v in range(n)]
        if new_colors == colors:
            return colors
        colors = new_colors


def _cells(colors: list[int]) -> list[list[int]]:
    cells: dict[int, list[int]] = {}
    for v, c in enumerate(colors):
        cells.setdefault(c, []).append(v)
    return [cells[c] for c in sorted(cells)]


def _encode(order: list[int], elems: list[str], adj_set: list[set[int]]) -> tuple:
    pos = [0] * len(order)
    for idx, v in enumerate(order):
        pos[v] = idx
    edges = []
    for v in order:
        for w in adj_set[v]:
            a, b = pos[v], pos[w]
            if a < b:
                edges.append((a, b))
    edges.sort()
    return (tuple(elems[v] for v in order), tuple(edges))


def _orbit_roots(n: int, gens: list[list[int]]) -> list[int]:
    # connected components under the generator action give the orbits
    parent = list(range(n))

    def find(v: int) -> int:
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for g in gens:
        for v in range(n):
            ra, rb = find(v), find(g[v])
            if ra != rb:
                parent[ra] = rb
    return [find(v) for v in range(n)]


def canonical_key(graph: MolecularGraph) -> CanonicalKey:
    """Permutation-invariant identity string of the labeled connectivity."""
    n = graph.n_atoms
    if n == 0:
        return CanonicalKey(f"{KEY_VERSION}:")
    elems = [el.symbol for el in graph.nodes]
    adj = graph.neighbors()
    adj_set = [set(nb) for nb in adj]

    init = {sym: k for k, sym in enumerate(sorted(set(elems)))}
    colors = _refine(adj, [init[s] for s in elems])

    best: dict = {"enc": None, "order": None}
    gens: list[list[int]] = []  # discovered automorphisms, as vertex maps

    def search(colors: list[int], path: list[int]) -> None:
        cells = _cells(colors)
        target = next((c for c in cells if len(c) > 1), None)
        if target is None:
            order = [c[0] for c in cells]
            enc = _encode(order, elems, adj_set)
            if best["enc"] is None or enc < best["enc"]:
                best["enc"] = enc
                best["order"] = order
            elif enc == best["enc"]:
                # two labelings with equal encodings define an automorphism
                perm = [0] * n
                for a, b in zip(best["order"], order):
                    perm[a] = b
                gens.append(perm)
            return
        tried: set[int] = set()
        for v in target:
            # prune v if an automorphism fixing every individualized vertex
            # so far maps an already-tried sibling onto it: the two subtrees
            # yield identical encoding sets
            fixing = [g for g in gens if all(g[p] == p for p in path)]
            roots = _orbit_roots(n, fixing)
            if roots[v] in {roots[u] for u in tried}:
                continue
            tried.add(v)
            # individualize v: give it a color preceding the rest of its cell
            branched = [2 * c + 1 for c in colors]
            branched[v] = 2 * colors[v]
            search(_refine(adj, branched), path + [v])

    search(colors, [])
    atoms, edges = best["enc"]
    edge_txt = ";".join(f"{i}-{j}" for i, j in edges)
    return CanonicalKey(f"{KEY_VERSION}:{','.join(atoms)}|{edge_txt}")


def brute_force_isomorphic(g1: MolecularGraph, g2: MolecularGraph) -> bool:
    """Exhaustive permutation check, for oracle use in tests (small graphs)."""
    if g1.n_atoms != g2.n_atoms or len(g1.edges) != len(g2.edges):
        return False
    syms1 = sorted(el.symbol for el in g1.nodes)
    syms2 = sorted(el.symbol for el in g2.nodes)
    if syms1 != syms2:
        return False
    e2 = set(g2.edges)
    n = g1.n_atoms
    for perm in itertools.permutations(range(n)):
        if any(g1.nodes[v].symbol != g2.nodes[perm[v]].symbol for v in range(n)):
            continue
        mapped = {tuple(sorted((perm[i], perm[j]))) for i, j in g1.edges}
        if mapped == e2:
            return True
    return False
