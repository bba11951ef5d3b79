"""Exhaustive enumeration of valid connectivity graphs for a formula.

Hydrogens are valence-1 leaves, so every connected valence-satisfiable
graph is a connected heavy-atom skeleton with hydrogens distributed over
the remaining valence. Enumeration walks all heavy skeletons, all
hydrogen distributions, keeps graphs whose heavy residual valences admit
integer bond orders, and dedupes by canonical key. Intended for small
formulas (a handful of heavy atoms): it is the reference-set generator
and the oracle behind isomer-count checks.
"""

from __future__ import annotations

import itertools

from .chem import Bag, ELEMENTS, Element, parse_formula
from .molgraph import (
    CanonicalKey,
    MAX_BOND_ORDER,
    MolecularGraph,
    assign_bond_orders,
    canonical_key,
)

__all__ = ["enumerate_isomers", "count_isomers"]

_H = ELEMENTS["H"]


def _connected_subgraph(n: int, edges: list[tuple[int, int]]) -> bool:
    if n == 0:
        return False
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


def _hydrogen_splits(total: int, caps: list[int]):
    """All ways to distribute `total` hydrogens under per-atom caps."""
    if not caps:
        if total == 0:
            yield ()
        return
    head = caps[0]
    for k in range(min(head, total) + 1):
        for rest in _hydrogen_splits(total - k, caps[1:]):
            yield (k,) + rest


def enumerate_isomers(formula: str | Bag) -> dict[str, MolecularGraph]:
    """Map canonical key -> one representative graph per valid isomer."""
    bag = parse_formula(formula) if isinstance(formula, str) else formula
    n_h = bag.count(_H)
    heavies: list[Element] = []
    for el, count in sorted(bag.counts.items(), key=lambda kv: kv[0].symbol):
        if el is not _H:
            heavies.extend([el] * count)

    found: dict[str, MolecularGraph] = {}

    if not heavies:
        # pure hydrogen: only H2 (one bond using both valences) is valid
        if n_h == 2:
            g = MolecularGraph((_H, _H), frozenset({(0, 1)}))
            found[canonical_key(g).key] = assign_bond_orders(g)
        return found

    n = len(heavies)
    possible_edges = list(itertools.combinations(range(n), 2))
    for picked in itertools.chain.from_iterable(
        itertools.combinations(possible_edges, k)
        for k in range(0, len(possible_edges) + 1)
    ):
        edges = list(picked)
        if n > 1 and not _connected_subgraph(n, edges):
            continue
        degree = [0] * n
        for i, j in edges:
            degree[i] += 1
            degree[j] += 1
        # each heavy edge consumes at least one valence unit
        caps = [heavies[i].target_valence - degree[i] for i in range(n)]
        if any(c < 0 for c in caps):
            continue
        for split in _hydrogen_splits(n_h, caps):
            # residual valence on the heavy skeleton must be coverable by
            # bond orders in [1, MAX_BOND_ORDER]
            residual = [heavies[i].target_valence - split[i] for i in range(n)]
            if any(
                not (degree[i] <= residual[i] <= MAX_BOND_ORDER * degree[i])
                for i in range(n)
            ):
                continue
            if n == 1 and residual[0] != 0:
                continue
            nodes = list(heavies)
            full_edges = set(edges)
            h_index = n
            for atom, k in enumerate(split):
                for _ in range(k):
                    nodes.append(_H)
                    full_edges.add((atom, h_index))
                    h_index += 1
            graph = MolecularGraph(tuple(nodes), frozenset(full_edges))
            ordered = assign_bond_orders(graph)
            if ordered is None:
                continue
            key = canonical_key(graph).key
            if key not in found:
                found[key] = ordered
    return found


def count_isomers(formula: str | Bag) -> int:
    return len(enumerate_isomers(formula))
