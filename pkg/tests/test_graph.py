import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tablegraph.graph import (
    AdjacencyTriple,
    CliqueExplosion,
    adjacency_from_cliques,
    connected_components,
    maximal_cliques,
    validate,
)


def brute_force_maximal_cliques(adj):
    """Every vertex subset that is a clique and cannot be extended."""
    a = np.asarray(adj) != 0
    v = a.shape[0]
    cliques = []
    for mask in range(1, 1 << v):
        members = [i for i in range(v) if mask >> i & 1]
        if all(a[i, j] for i, j in itertools.combinations(members, 2)):
            cliques.append(frozenset(members))
    found = set(cliques)
    maximal = []
    for c in cliques:
        if not any(c | {x} in found for x in range(v) if x not in c):
            maximal.append(tuple(sorted(c)))
    return sorted(maximal)


def random_graph(rng, v, p):
    upper = np.triu(rng.random((v, v)) < p, 1)
    a = (upper | upper.T).astype(np.uint8)
    np.fill_diagonal(a, 1)
    return a


def edges(v, pairs):
    a = np.eye(v, dtype=np.uint8)
    for i, j in pairs:
        a[i, j] = a[j, i] = 1
    return a


def test_validate_identity_clean():
    eye = np.eye(3, dtype=np.uint8)
    assert validate(AdjacencyTriple(eye, eye, eye)) == []


def test_validate_containment():
    eye = np.eye(3, dtype=np.uint8)
    cells = edges(3, [(0, 1)])
    cols = edges(3, [(0, 1)])
    out = validate(AdjacencyTriple(cells, eye.copy(), cols))
    assert len(out) == 1
    assert (out[0].matrix, out[0].i, out[0].j, out[0].rule) == ("rows", 0, 1, "cells-contained")


def test_validate_symmetry():
    eye = np.eye(3, dtype=np.uint8)
    rows = eye.copy()
    rows[1, 2] = 1
    out = validate(AdjacencyTriple(eye, rows, eye))
    assert [(v.matrix, v.i, v.j, v.rule) for v in out] == [("rows", 1, 2, "symmetric")]


def test_validate_reflexive():
    eye = np.eye(2, dtype=np.uint8)
    cols = eye.copy()
    cols[1, 1] = 0
    out = validate(AdjacencyTriple(eye, eye, cols))
    assert [(v.matrix, v.rule) for v in out] == [("cols", "reflexive")]


@pytest.mark.parametrize("v,pairs,expected", [
    (3, [], ((0,), (1,), (2,))),
    (3, [(0, 1)], ((0, 1), (2,))),
    (5, [(0, 1), (1, 2), (3, 4)], ((0, 1, 2), (3, 4))),
])
def test_connected_components(v, pairs, expected):
    out = connected_components(edges(v, pairs))
    assert out.cliques == expected
    assert out.kind == "cell"


@pytest.mark.parametrize("v,pairs,expected", [
    (3, [(0, 2), (1, 2)], ((0, 2), (1, 2))),
    (4, list(itertools.combinations(range(4), 2)), ((0, 1, 2, 3),)),
    (4, [(0, 1), (2, 3)], ((0, 1), (2, 3))),
])
def test_maximal_cliques_examples(v, pairs, expected):
    assert maximal_cliques(edges(v, pairs)).cliques == expected


def test_maximal_cliques_match_brute_force():
    rng = np.random.default_rng(11)
    for n in range(200):
        v = int(rng.integers(1, 13))
        a = random_graph(rng, v, rng.uniform(0.1, 0.9))
        assert list(maximal_cliques(a, max_cliques=10**6).cliques) == brute_force_maximal_cliques(a)


def test_diagonal_is_ignored():
    a = np.zeros((3, 3), dtype=np.uint8)
    assert maximal_cliques(a).cliques == ((0,), (1,), (2,))


def test_clique_guard():
    # complement of a perfect matching on 12 vertices has 2^6 maximal cliques
    v = 12
    a = np.ones((v, v), dtype=np.uint8)
    for i in range(0, v, 2):
        a[i, i + 1] = a[i + 1, i] = 0
    assert len(maximal_cliques(a, max_cliques=1000)) == 64
    with pytest.raises(CliqueExplosion):
        maximal_cliques(a, max_cliques=10)


def test_adjacency_from_cliques_examples():
    assert np.array_equal(adjacency_from_cliques([(0, 2), (1, 2)], 3), edges(3, [(0, 2), (1, 2)]))
    assert np.array_equal(adjacency_from_cliques([(0,), (1,)], 2), np.eye(2))
    with pytest.raises(IndexError):
        adjacency_from_cliques([(0, 3)], 3)


@st.composite
def symmetric_reflexive(draw):
    v = draw(st.integers(1, 12))
    bits = draw(st.lists(st.booleans(), min_size=v * (v - 1) // 2, max_size=v * (v - 1) // 2))
    a = np.eye(v, dtype=np.uint8)
    for (i, j), b in zip(itertools.combinations(range(v), 2), bits):
        a[i, j] = a[j, i] = b
    return a


@settings(max_examples=150, deadline=None)
@given(symmetric_reflexive())
def test_round_trip_property(a):
    cl = maximal_cliques(a, max_cliques=10**6)
    assert np.array_equal(adjacency_from_cliques(cl, a.shape[0]), a)


@settings(max_examples=150, deadline=None)
@given(symmetric_reflexive())
def test_components_partition(a):
    comps = connected_components(a).cliques
    flat = [x for c in comps for x in c]
    assert sorted(flat) == list(range(a.shape[0]))
    assert [c[0] for c in comps] == sorted(c[0] for c in comps)
    # no edge crosses components
    label = {x: k for k, c in enumerate(comps) for x in c}
    for i, j in zip(*np.nonzero(a)):
        assert label[i] == label[j]
