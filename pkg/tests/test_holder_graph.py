import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from divtree.errors import ProfileViolationError
from divtree.grid_core import Grid
from divtree.holder_graph import (GraphCloud, bracket_constant, flat_graph, graph_distance, holder_grid,
                                  holder_tree, holder_weights, pile_cubes, power_hump, verify_distance_bracket,
                                  verify_piling)
from divtree.tree_decomp import validate_tree

L = 0.25


def test_flat_graph_hand_trace():
    # phi = 2.5 l. Root (0, l): 3(Q + l e) reaches 3l > 2.5l -> two halves on (l, 1.5l).
    # Side l/2 at (l, 1.5l): shifted cube tripled spans (l, 2.5l), inside -> same-side child.
    # From (1.5l, 2l) on every tripled cube pokes above 2.5l -> halving each level.
    piled = pile_cubes(flat_graph(L, 2.5), 6)
    assert piled.level_counts() == [1, 2, 2, 4, 8, 16, 32]
    sides = sorted({(q.level, piled.side(t)) for t, q in enumerate(piled)})
    assert sides == [(0, L), (1, L / 2), (2, L / 2), (3, L / 4), (4, L / 8), (5, L / 16), (6, L / 32)]


def test_children_rules():
    piled = pile_cubes(power_hump(L, 0.5), 8)
    kids = {}
    for t, q in enumerate(piled):
        if q.parent is not None:
            kids.setdefault(q.parent, []).append(t)
            assert q.y1 == piled[q.parent].y2
    for p, ks in kids.items():
        same = [k for k in ks if piled[k].side == piled[p].side]
        assert (len(ks), len(same)) in ((1, 1), (2, 0))


def test_piling_invariants():
    piled = pile_cubes(power_hump(L, 0.5), 10)
    for k, rep in verify_piling(piled).items():
        assert rep.passed, k
    assert verify_piling(piled)["overlap_parent_only"].details["N"] == 2


@given(st.floats(0.25, 1.0), st.floats(0.0, 2.0))
def test_piling_invariants_random_hump(alpha, cfac):
    pr = power_hump(L, alpha, cfac * L ** (1 - alpha))
    piled = pile_cubes(pr, 7)
    for k, rep in verify_piling(piled).items():
        assert rep.passed, k


def test_root_must_be_below_graph():
    with pytest.raises(ProfileViolationError):
        pile_cubes(flat_graph(L, 0.5), 3)


def test_bracket_constant():
    assert bracket_constant(2) == pytest.approx(3 * np.sqrt(5))


def test_distance_bracket_power_hump():
    pr = power_hump(L, 0.5)
    piled = pile_cubes(pr, 8)
    assert verify_distance_bracket(piled, GraphCloud(pr, L / 256)).passed


def test_distance_bracket_flat():
    pr = flat_graph(L, 2.5)
    piled = pile_cubes(pr, 6)
    rep = verify_distance_bracket(piled, GraphCloud(pr, L / 256))
    assert rep.passed


def test_flat_distance_field():
    pr = flat_graph(L, 2.5)
    g = holder_grid(pr, L / 32)
    d = graph_distance(pr, g).values
    Y = g.mesh()[1]
    below = Y < 2.5 * L
    # horizontal extent of the cloud is wide, so the nearest point is straight above
    assert np.allclose(d[below], 2.5 * L - Y[below], atol=g.h / 2)


def test_vertex_distance_dense_oracle():
    pr = power_hump(L, 0.5)
    h = L / 64
    g = Grid((-h / 2, 2 * L - 4.5 * h), h, (1, 4))
    d = graph_distance(pr, g).values[0]
    delta = 2 * L - g.axis(1)
    # oracle: direct minimum over a dense sampling at 8x the cloud resolution
    x = np.linspace(-2.5 * L, 2.5 * L, 2_000_001)
    y = pr(x[:, None])
    for k in range(4):
        o = np.sqrt(x ** 2 + (y - g.axis(1)[k]) ** 2).min()
        assert abs(d[k] - o) <= h / 2
        assert abs(o - delta[k]) < 1e-9


def test_tree_flat_case_valid():
    pr = flat_graph(L, 2.5)
    piled = pile_cubes(pr, 6)
    g = holder_grid(pr, L / 64)
    tree = holder_tree(piled, g)
    rep = validate_tree(tree)
    assert rep.passed and tree.N == 2
    assert tree.b[tree.root] is None


def test_connector_is_overlap():
    pr = power_hump(L, 0.5)
    piled = pile_cubes(pr, 6, min_side=2 * L / 64)
    tree = holder_tree(piled, holder_grid(pr, L / 64))
    for t in range(len(tree)):
        q = tree.parent[t]
        if q is None:
            continue
        ov = np.intersect1d(tree.omega_cells[t], tree.omega_cells[q])
        assert np.array_equal(np.sort(tree.b_cells[t]), ov)


def test_weights():
    pr = power_hump(L, 0.5)
    piled = pile_cubes(pr, 6, min_side=2 * L / 64)
    g = holder_grid(pr, L / 64)
    tree = holder_tree(piled, g)
    wbar, what, rep = holder_weights(piled, pr, g, 1.0, 2.0, tree)
    assert rep.passed and rep.details["B_measure_exact"]
    assert np.isfinite(rep.details["W_constant"])
    m = tree.mask
    assert np.all(wbar.values[m] > 0) and np.all(what.values[m] > 0)
    lip = power_hump(L, 1.0)
    piled1 = pile_cubes(lip, 6, min_side=2 * L / 64)
    tree1 = holder_tree(piled1, holder_grid(lip, L / 64))
    w1, _, _ = holder_weights(piled1, lip, holder_grid(lip, L / 64), 0.0, 2.0, tree1)
    assert np.all(w1.values[tree1.mask] == 1.0)


def test_b_measure_exact_half_cube():
    pr = power_hump(L, 0.5)
    piled = pile_cubes(pr, 6)
    g = holder_grid(pr, L / 128)
    tree = holder_tree(piled, g)
    for t in range(1, len(tree)):
        assert len(tree.b_cells[t]) * g.cell_measure == pytest.approx(piled.side(t) ** 2 / 2, rel=1e-12)
