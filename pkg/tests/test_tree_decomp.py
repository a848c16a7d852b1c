import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from divtree.errors import CoverGapError, DegenerateConnectorError, MalformedTreeError
from divtree.grid_core import Grid, GridFunction, Region
from divtree.tree_decomp import (C1_constant, DomainTree, T_bound, decompose, hardy_tree_operator,
                                 partition_of_unity, tree_weight, validate_tree, verify_decomposition_bound,
                                 verify_T_bound)


def chain(h=1 / 16):
    g = Grid((0.0,), h, (int(round(4 / h)),))
    omega = [Region.box([0], [2]), Region.box([1], [3]), Region.box([2.5], [4])]
    b = [None, Region.box([1], [2]), Region.box([2.5], [3])]
    return DomainTree([None, 0, 1], omega, b, g, N=2)


def cells_in(g, lo, hi):
    x = g.centers()[:, 0]
    return (x > lo) & (x < hi)


def comb(heights, h=1 / 8):
    """Root bar (0,K)x(0,1); tooth i stacks nodes (i,i+1)x(j+0.5, j+2) for j < heights[i]."""
    K = len(heights)
    top = max(heights) + 2
    g = Grid((0.0, 0.0), h, (int(K / h), int(top / h)))
    parent, omega, b = [None], [Region.box([0, 0], [K, 1])], [None]
    for i, H in enumerate(heights):
        prev = 0
        for j in range(H):
            omega.append(Region.box([i, j + 0.5], [i + 1, j + 2]))
            b.append(Region.box([i, j + 0.5], [i + 1, j + 1]))
            parent.append(prev)
            prev = len(omega) - 1
    return DomainTree(parent, omega, b, g, N=2)


def test_chain_validates_with_N2():
    rep = validate_tree(chain())
    assert rep.passed
    assert (rep.min_cover, rep.max_cover) == (1, 2)


def test_overlapping_connectors_fail():
    g = Grid((0.0,), 1 / 16, (64,))
    r = Region.box([0], [2])
    tree = DomainTree([None, 0, 0], [r, r, r], [None, Region.box([0], [1]), Region.box([0.5], [1.5])], g, N=3)
    rep = validate_tree(tree)
    assert not rep.passed and not rep.b_disjoint


def test_single_node_tree():
    g = Grid((0.0, 0.0), 1 / 8, (8, 8))
    tree = DomainTree([None], [Region.box([0, 0], [1, 1])], [None], g, N=1)
    assert validate_tree(tree).passed
    assert np.all(tree_weight(tree).values == 1.0)


def test_cycle_rejected():
    g = Grid((0.0,), 1 / 16, (64,))
    r = Region.box([0], [2])
    with pytest.raises(MalformedTreeError):
        DomainTree([None, 2, 1], [r, r, r], [None, r, r], g, N=3)


def test_partition_at_1_5():
    tree = chain()
    phi = partition_of_unity(tree)
    i = int(1.5 * 16)  # cell (1.5, 1.5625)
    assert phi[0].values[i] == 0.5 and phi[1].values[i] == 0.5 and phi[2].values[i] == 0.0
    total = sum(phi[t].values for t in phi)
    assert np.allclose(total[tree.mask], 1.0)


def test_cover_gap():
    g = Grid((0.0,), 1 / 16, (64,))
    tree = DomainTree([None], [Region.box([0], [2])], [None], g, N=1, domain=Region.box([0], [3]))
    with pytest.raises(CoverGapError):
        partition_of_unity(tree)


def test_zero_f():
    tree = chain()
    res = decompose(GridFunction.zeros(tree.grid, tree.mask), tree)
    assert all(not np.any(v) for v in res.values)


def test_worked_example_leaf_part():
    tree = chain()
    g = tree.grid
    rng = np.random.default_rng(3)
    v = rng.uniform(-1, 1, g.size)
    v -= v.mean()
    f = GridFunction(g, v)
    res = decompose(f, tree)
    phi2 = partition_of_unity(tree)[2].values
    B2 = cells_in(g, 2.5, 3)
    h = g.h
    expect = v * phi2 - B2 / (B2.sum() * h) * (v * phi2).sum() * h
    assert np.allclose(res.part(2).values, expect, atol=1e-14)


def test_constant_f_integrals():
    tree = chain()
    res = decompose(GridFunction(tree.grid, np.ones(tree.grid.size)), tree)
    assert res.integrals[0] == pytest.approx(4.0, abs=1e-12)
    assert abs(res.integrals[1]) < 1e-12 and abs(res.integrals[2]) < 1e-12


def test_hardy_operator_examples():
    tree = chain()
    g = tree.grid
    f = GridFunction(g, cells_in(g, 3, 4).astype(float))
    Tf = hardy_tree_operator(f, tree).values
    B2 = cells_in(g, 2.5, 3)
    assert np.allclose(Tf[B2], 2 / 3)
    one = hardy_tree_operator(GridFunction(g, np.ones(g.size)), tree).values
    Bany = cells_in(g, 1, 2) | B2
    assert np.allclose(one[Bany], 1.0) and np.all(one[~Bany] == 0)
    assert not np.any(hardy_tree_operator(GridFunction.zeros(g), tree).values)


def test_formula_constants():
    assert T_bound(2, 2) == pytest.approx(4.0)
    assert T_bound(2, 1) == pytest.approx(2 * np.sqrt(2))
    assert T_bound(2, 1) == pytest.approx(2.828, abs=1e-3)
    assert C1_constant(2, 2) == pytest.approx(136.0)


def test_tree_weight_chain():
    tree = chain()
    w = tree_weight(tree).values
    g = tree.grid
    assert np.allclose(w[cells_in(g, 2.5, 3)], 1 / 3)
    assert np.allclose(w[cells_in(g, 1, 2)], 1 / 3)  # |B1| = 1, |W1| = 3
    outside = ~(cells_in(g, 2.5, 3) | cells_in(g, 1, 2))
    assert np.all(w[outside] == 1.0)


def test_decomposition_bound_chain():
    tree = chain()
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = rng.uniform(-1, 1, tree.grid.size)
        v -= v.mean()
        rep = verify_decomposition_bound(GridFunction(tree.grid, v), tree, 2.0)
        assert rep.passed and rep.empirical < 1
    rep = verify_decomposition_bound(GridFunction.zeros(tree.grid), tree, 2.0)
    assert rep.passed and rep.empirical == 0


def test_degenerate_connector():
    g = Grid((0.0,), 1.0, (4,))
    omega = [Region.box([0], [2]), Region.box([1], [3])]
    tree = DomainTree([None, 0], omega, [None, Region.box([1.6], [1.9])], g, N=2)
    with pytest.raises(DegenerateConnectorError):
        decompose(GridFunction(g, np.ones(4)), tree)


heights = st.lists(st.integers(0, 4), min_size=1, max_size=5)


@given(heights, st.integers(0, 2 ** 31 - 1), st.booleans())
def test_telescoping_means_support(hs, seed, zero_mean):
    tree = comb(hs)
    g = tree.grid
    rng = np.random.default_rng(seed)
    m = tree.mask_flat
    v = np.where(m, rng.normal(size=g.size) * rng.uniform(0.1, 10), 0.0)
    if zero_mean:
        v[m] -= v[m].mean()
    f = GridFunction(g, v.reshape(g.shape), tree.mask)
    res = decompose(f, tree)
    assert np.max(np.abs(res.sum_parts() - v)) <= 1e-12 * np.max(np.abs(v))
    l1 = np.abs(v).sum() * g.cell_measure
    for t in range(len(tree)):
        if t != tree.root:
            assert abs(res.integrals[t]) <= 1e-10 * l1
        outside = np.ones(g.size, bool)
        outside[tree.omega_cells[t]] = False
        assert not np.any(res.part(t).values.ravel()[outside])
    assert abs(res.integrals[tree.root] - v.sum() * g.cell_measure) <= 1e-10 * l1


@given(heights, st.sampled_from([1.5, 2.0, 3.0]), st.integers(0, 1000))
def test_T_and_C1_bounds_hold(hs, p, seed):
    tree = comb(hs)
    assert verify_T_bound(tree, p, trials=6, seed=seed).passed
    rng = np.random.default_rng(seed)
    v = np.where(tree.mask_flat, rng.uniform(-1, 1, tree.grid.size), 0.0)
    rep = verify_decomposition_bound(GridFunction(tree.grid, v.reshape(tree.grid.shape), tree.mask), tree, p)
    assert rep.passed


@given(heights)
def test_weight_in_unit_interval(hs):
    tree = comb(hs)
    w = tree_weight(tree).values.ravel()[tree.mask_flat]
    assert np.all(w > 0) and np.all(w <= 1)
