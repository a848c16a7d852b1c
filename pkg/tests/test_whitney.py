from fractions import Fraction
from itertools import product

import numpy as np
import pytest

from divtree.errors import EmptyDomainError
from divtree.grid_core import Box, Grid, Region
from divtree.tree_decomp import validate_tree
from divtree.whitney import (EPS, build_chain_tree, eps_inequality, shadow_weight, shadows, verify_cube_geometry,
                             verify_distances, verify_M1, whitney_decompose, whitney_tree, WhitneyCube,
                             WhitneyFamily)


def lshape():
    return Region.union([Box([0, 0], [1, 0.5]), Box([0, 0], [0.5, 1])])


def grid(h):
    m = int(round(1 / h))
    return Grid((0.0, 0.0), h, (m, m))


def _gap2(lo, hi, blo, bhi):
    g = [max(Fraction(0), blo[i] - hi[i], lo[i] - bhi[i]) for i in range(2)]
    return g[0] ** 2 + g[1] ** 2


def lshape_oracle(max_level):
    """Maximal dyadic cubes of the unit frame inside the L with diam <= dist, in exact rationals."""
    half, one = Fraction(1, 2), Fraction(1)
    notch = ((half, half), (one, one))

    def inside(lo, hi):
        return hi[0] <= one and hi[1] <= one and not (hi[0] > half and hi[1] > half)

    def dist2(lo, hi):
        # distance to the complement: the outside of the frame or the notch
        d_frame = min(lo[0], lo[1], one - hi[0], one - hi[1]) ** 2
        return min(d_frame, _gap2(lo, hi, *notch))

    def ok(lo, hi, s):
        return inside(lo, hi) and dist2(lo, hi) >= 2 * s * s

    out = []
    for k in range(max_level + 1):
        s = Fraction(1, 2 ** k)
        for i, j in product(range(2 ** k), repeat=2):
            lo, hi = (i * s, j * s), ((i + 1) * s, (j + 1) * s)
            if not ok(lo, hi, s):
                continue
            if k == 0:
                out.append((k, i, j))
                continue
            plo = (i // 2 * 2 * s, j // 2 * 2 * s)
            if not ok(plo, (plo[0] + 2 * s, plo[1] + 2 * s), 2 * s):
                out.append((k, i, j))
    return sorted(out)


def test_lshape_cubes_match_bruteforce():
    cubes = whitney_decompose(lshape(), grid(1 / 256), 6)
    got = sorted((q.level,) + tuple(q.index) for q in cubes)
    assert got == lshape_oracle(6)


def test_unit_square_tiles_and_distance():
    sq = Region.box([0, 0], [1, 1])
    cubes = whitney_decompose(sq, grid(1 / 128), 5)
    rep = verify_distances(cubes, cubes.sample_spacing)
    assert rep.passed
    geo = verify_cube_geometry(cubes, parent=[None] * len(cubes))
    assert geo["disjoint_interiors"].passed


def test_disk_distance_by_boundary_cloud():
    c = np.array([0.5, 0.5])
    disk = Region.from_predicate(lambda p: ((p - c) ** 2).sum(1) < 0.2025, Box([0.05, 0.05], [0.95, 0.95]))
    cubes = whitney_decompose(disk, grid(1 / 256), 5)
    th = np.linspace(0, 2 * np.pi, 20000, endpoint=False)
    cloud = c + 0.45 * np.stack([np.cos(th), np.sin(th)], 1)
    step = 0.45 * 2 * np.pi / 20000

    def dist(q):
        gap = np.maximum(0, np.maximum(q.lo - cloud, cloud - q.hi))
        return float(np.sqrt((gap ** 2).sum(1)).min())

    rep = verify_distances(cubes, max(cubes.sample_spacing, step), dist_fn=dist)
    assert rep.passed, rep.details


def test_empty_domain():
    with pytest.raises(EmptyDomainError):
        nothing = Region.from_predicate(lambda p: np.zeros(len(p), bool), Box([0, 0], [1, 1]))
        whitney_decompose(nothing, grid(1 / 16), 3)


def test_two_adjacent_cubes_single_edge():
    dom = Region.box([0, 0], [1, 1])
    g = grid(1 / 64)
    two = WhitneyFamily([WhitneyCube(2, (1, 1), (0.0, 0.0), 1.0), WhitneyCube(2, (2, 1), (0.0, 0.0), 1.0)])
    t = build_chain_tree(two, root=0, grid=g, domain=dom)
    assert t.parent == (None, 0)
    assert np.allclose(t.b[1].bounding_box.center, [0.5, 0.375])
    assert validate_tree(t).passed


@pytest.fixture(scope="module")
def ltree():
    return whitney_tree(lshape(), grid(1 / 256), 6)


def test_lshape_geometry(ltree):
    cubes = ltree.meta["cubes"]
    geo = verify_cube_geometry(cubes)
    for k, rep in geo.items():
        assert rep.passed, k
    assert geo["expanded_overlap"].empirical <= 144
    fam = ltree.meta["family_cubes"]
    assert verify_distances(fam, fam.sample_spacing).passed


def test_lshape_tree_valid(ltree):
    assert validate_tree(ltree).passed


def test_eps_inequality():
    assert EPS == 2.0 ** -7
    for l in (1.0, 0.5, 2.0 ** -6):
        assert eps_inequality(EPS, l)
    assert 1 / 8 - 8 * EPS > EPS / 8
    assert not eps_inequality(0.02)


def test_shadows_monotone_and_oracle(ltree):
    sh = shadows(ltree)
    for t in range(len(ltree)):
        # oracle: explicit union of the grown cubes over the subtree
        sub = ltree.subtree(t)
        union = np.unique(np.concatenate([ltree.omega_cells[s] for s in sub]))
        assert np.array_equal(np.sort(sh[t].cells), union)
        assert sh[t].measure >= ltree.omega_measure[t] - 1e-15
        q = ltree.parent[t]
        if q is not None:
            assert np.isin(sh[t].cells, sh[q].cells).all()


def test_leaf_shadow_is_its_cube(ltree):
    sh = shadows(ltree)
    leaves = [t for t in range(len(ltree)) if not ltree.children[t]]
    for t in leaves[:20]:
        assert np.array_equal(np.sort(sh[t].cells), np.sort(ltree.omega_cells[t]))


def test_root_shadow_covers_all(ltree):
    sh = shadows(ltree)
    assert len(sh[ltree.root].cells) == int(ltree.mask_flat.sum())


def test_shadow_weight_bounds_and_M1(ltree):
    w = shadow_weight(ltree).values.ravel()[ltree.mask_flat]
    assert np.all(w > 0) and np.all(w <= 1)
    rep = verify_M1(ltree)
    assert rep.bound == 2.0 ** 22
    assert rep.passed


def test_single_cube_weight():
    dom = Region.box([0, 0], [1, 1])
    g = grid(1 / 64)
    cubes = whitney_decompose(dom, g, 3)
    one = type(cubes)(cubes[:1], **cubes.meta)
    tree = build_chain_tree(one, grid=g, domain=dom)
    w = shadow_weight(tree).values.ravel()
    q = one[0]
    c = Region.box(q.lo, q.hi).cell_indices(g)
    assert np.allclose(w[c], q.side ** 2 / tree.w_measure[0])
    assert verify_M1(tree).empirical <= 1.0
