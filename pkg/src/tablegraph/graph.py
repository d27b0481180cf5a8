"""Cell/row/column sharing graphs over word vertices.

Adjacency matrices are square ``numpy`` arrays of 0/1 values. Every vertex is
adjacent to itself; the clique routines ignore the diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAX_VERTICES = 4096
KINDS = ("cells", "rows", "cols")


class CliqueExplosion(RuntimeError):
    """Raised when maximal clique enumeration exceeds its guard."""


@dataclass(frozen=True)
class AdjacencyTriple:
    cells: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    @property
    def v(self) -> int:
        return self.cells.shape[0]

    def __getitem__(self, kind: str) -> np.ndarray:
        if kind not in KINDS:
            raise KeyError(kind)
        return getattr(self, kind)

    def __eq__(self, other):
        if not isinstance(other, AdjacencyTriple):
            return NotImplemented
        return all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k])
            for k in KINDS
        )

    __hash__ = None


@dataclass(frozen=True)
class CliqueSet:
    cliques: tuple[tuple[int, ...], ...]
    kind: str  # "cell", "row" or "column"

    def __len__(self):
        return len(self.cliques)

    def __iter__(self):
        return iter(self.cliques)

    def memberships(self, v: int) -> list[list[int]]:
        """Clique indices each vertex belongs to."""
        out: list[list[int]] = [[] for _ in range(v)]
        for ci, members in enumerate(self.cliques):
            for m in members:
                out[m].append(ci)
        return out


@dataclass(frozen=True)
class Violation:
    matrix: str
    i: int
    j: int
    rule: str

    def __str__(self):
        return f"{self.matrix}[{self.i}][{self.j}]: {self.rule}"


def as_adjacency(bits) -> np.ndarray:
    a = np.asarray(bits)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    return (a != 0).astype(np.uint8)


def validate(adj: AdjacencyTriple) -> list[Violation]:
    """List every symmetry, reflexivity and containment violation.

    Containment (two words in one cell share a row and a column) is checked
    on the upper triangle; asymmetric entries are reported by the symmetry
    rule instead.
    """
    out: list[Violation] = []
    v = adj.v
    for kind in KINDS:
        m = adj[kind]
        if m.shape != (v, v):
            out.append(Violation(kind, -1, -1, f"shape {m.shape} != {(v, v)}"))
    if out:
        return out

    for kind in KINDS:
        m = adj[kind] != 0
        for i in np.flatnonzero(~np.diag(m)):
            out.append(Violation(kind, int(i), int(i), "reflexive"))
        iu, ju = np.nonzero(np.triu(m != m.T, 1))
        for i, j in zip(iu, ju):
            out.append(Violation(kind, int(i), int(j), "symmetric"))

    cells = np.triu(adj.cells != 0, 1)
    for other in ("rows", "cols"):
        bad = cells & ~(adj[other] != 0)
        for i, j in zip(*np.nonzero(bad)):
            out.append(Violation(other, int(i), int(j), "cells-contained"))
    return out


def connected_components(adj) -> CliqueSet:
    a = as_adjacency(adj)
    v = a.shape[0]
    label = np.full(v, -1, dtype=np.int64)
    comps = []
    for start in range(v):
        if label[start] >= 0:
            continue
        label[start] = len(comps)
        stack, members = [start], [start]
        while stack:
            u = stack.pop()
            for w in np.flatnonzero(a[u] | a[:, u]):
                if label[w] < 0:
                    label[w] = len(comps)
                    stack.append(int(w))
                    members.append(int(w))
        comps.append(tuple(sorted(members)))
    return CliqueSet(tuple(comps), "cell")


def maximal_cliques(adj, kind: str = "row", max_cliques: int | None = None) -> CliqueSet:
    """Enumerate all maximal cliques (Bron-Kerbosch with Tomita pivoting).

    ``max_cliques`` defaults to ``10 * v``; exceeding it raises
    :class:`CliqueExplosion`.
    """
    a = as_adjacency(adj)
    v = a.shape[0]
    if v > MAX_VERTICES:
        raise CliqueExplosion(f"{v} vertices exceeds limit {MAX_VERTICES}")
    if max_cliques is None:
        max_cliques = 10 * max(v, 1)

    # neighbourhoods as int bitsets, diagonal dropped
    nbrs = []
    for i in range(v):
        row = a[i].copy()
        row[i] = 0
        nbrs.append(sum(1 << int(j) for j in np.flatnonzero(row)))

    found: list[tuple[int, ...]] = []

    def expand(r: int, p: int, x: int):
        if not p and not x:
            found.append(_bits_to_tuple(r))
            if len(found) > max_cliques:
                raise CliqueExplosion(
                    f"more than {max_cliques} maximal cliques for v={v}"
                )
            return
        px = p | x
        pivot, best = -1, -1
        while px:
            low = px & -px
            u = low.bit_length() - 1
            c = _popcount(p & nbrs[u])
            if c > best:
                pivot, best = u, c
            px ^= low
        cand = p & ~nbrs[pivot]
        while cand:
            low = cand & -cand
            u = low.bit_length() - 1
            expand(r | low, p & nbrs[u], x & nbrs[u])
            p &= ~low
            x |= low
            cand ^= low

    if v:
        expand(0, (1 << v) - 1, 0)
    return CliqueSet(tuple(sorted(found)), kind)


def adjacency_from_cliques(cliques: Iterable[Sequence[int]], v: int) -> np.ndarray:
    a = np.eye(v, dtype=np.uint8)
    for members in cliques:
        idx = np.asarray(list(members), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= v):
            raise IndexError(f"clique member out of range for v={v}: {list(members)}")
        a[np.ix_(idx, idx)] = 1
    return a


def reconstruct(adj: AdjacencyTriple, max_cliques: int | None = None) -> dict[str, CliqueSet]:
    """Cells as connected components, rows and columns as maximal cliques."""
    return {
        "cells": connected_components(adj.cells),
        "rows": maximal_cliques(adj.rows, "row", max_cliques),
        "cols": maximal_cliques(adj.cols, "column", max_cliques),
    }


def _bits_to_tuple(bits: int) -> tuple[int, ...]:
    out = []
    while bits:
        low = bits & -bits
        out.append(low.bit_length() - 1)
        bits ^= low
    return tuple(out)


def _popcount(x: int) -> int:
    return bin(x).count("1")
