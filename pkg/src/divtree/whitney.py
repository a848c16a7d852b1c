"""Whitney decompositions, chain trees through shared faces, shadows and the shadow weight.

Cubes live on the dyadic lattice of a frame cube [origin, origin + scale]^n.
Distances to the complement are computed against a fine lattice of exterior
cells, which is exact for box-union domains aligned with that lattice.

Two realisations of the connector cubes are provided:
  * the continuum one (expansion factor 1 + eps, connector side eps*l/4), checked
    in exact box arithmetic by :func:`verify_cube_geometry`;
  * the grid one used by the solver, where Q*_t is Q_t grown by one cell and B_t
    is the 2^n-cell cube centered at the face center (needs l_min >= 4h).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from itertools import product

import numpy as np
from scipy.spatial import cKDTree

from .errors import DisconnectedError, EmptyDomainError
from .grid_core import Box, Grid, GridFunction, Region
from .tree_decomp import CheckReport, DomainTree

__all__ = [
    "EPS", "WhitneyCube", "WhitneyFamily", "whitney_decompose", "build_chain_tree",
    "Shadow", "shadows", "shadow_weight", "verify_M1", "face_neighbours",
    "touching_neighbours", "verify_cube_geometry", "max_box_overlap", "continuum_connectors",
    "eps_inequality", "whitney_tree", "box_distance", "verify_distances",
]

EPS = 2.0 ** -7


@dataclass(frozen=True)
class WhitneyCube:
    level: int
    index: tuple
    origin: tuple
    scale: float
    chain_parent: int | None = None

    @property
    def ndim(self) -> int:
        return len(self.index)

    @property
    def side(self) -> float:
        return self.scale * 2.0 ** -self.level

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.index) * self.side

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.side

    @property
    def center(self) -> np.ndarray:
        return self.lo + 0.5 * self.side

    @property
    def diam(self) -> float:
        return self.side * np.sqrt(self.ndim)

    def box(self) -> Box:
        return Box(self.lo, self.hi)

    def expanded(self, eps: float = EPS) -> Box:
        return self.box().expand(0.5 * eps * self.side)

    def int_bounds(self, L: int):
        f = 2 ** (L - self.level)
        lo = np.asarray(self.index) * f
        return lo, lo + f

    def key(self):
        return (self.level,) + tuple(self.index)


class WhitneyFamily(list):
    """List of cubes plus construction metadata."""

    def __init__(self, cubes, **meta):
        super().__init__(cubes)
        self.meta = meta
        for k, v in meta.items():
            setattr(self, k, v)


def box_distance(lo1, hi1, lo2, hi2) -> np.ndarray:
    """Euclidean distance between closed boxes (broadcasting over leading axes)."""
    gap = np.maximum(0.0, np.maximum(np.asarray(lo2) - hi1, np.asarray(lo1) - hi2))
    return np.sqrt((gap * gap).sum(axis=-1))


class _Exterior:
    """Complement of the domain inside the frame as a set of closed lattice cells."""

    def __init__(self, domain: Region, origin, scale, J: int):
        n = domain.ndim
        self.n = n
        self.origin = np.asarray(origin, float)
        self.scale = scale
        self.J = J
        self.s = scale * 2.0 ** -J
        m = 2 ** J
        ax = self.origin[0] + (np.arange(m) + 0.5) * self.s
        axes = [self.origin[i] + (np.arange(m) + 0.5) * self.s for i in range(n)]
        del ax
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
        inside = domain.contains(pts).reshape((m,) * n)
        self.inside = inside
        # summed-area table for O(1) inside counts on dyadic blocks
        sat = inside.astype(np.int64)
        for i in range(n):
            sat = np.cumsum(sat, axis=i)
        self.sat = np.pad(sat, [(1, 0)] * n)
        ext = np.flatnonzero(~inside.ravel())
        self.ext_centers = pts[ext]
        self.tree = cKDTree(self.ext_centers) if len(ext) else None
        self.frame_lo = self.origin
        self.frame_hi = self.origin + scale

    def inside_count(self, lo_i, hi_i) -> int:
        n = self.n
        tot = 0
        for corner in product((0, 1), repeat=n):
            idx = tuple(hi_i[d] if c else lo_i[d] for d, c in enumerate(corner))
            sign = (-1) ** (n - sum(corner))
            tot += sign * int(self.sat[idx])
        return tot

    def distance(self, lo, hi) -> float:
        """dist(closed box, complement of the domain)."""
        d = float(min(np.min(lo - self.frame_lo), np.min(self.frame_hi - hi)))
        if self.tree is None:
            return d
        c = 0.5 * (lo + hi)
        hd = 0.5 * np.linalg.norm(hi - lo)
        hs = 0.5 * self.s
        dc, _ = self.tree.query(c)
        cand = self.tree.query_ball_point(c, dc + hd + hs * np.sqrt(self.n) + 1e-12)
        if cand:
            ctr = self.ext_centers[cand]
            bd = box_distance(lo, hi, ctr - hs, ctr + hs)
            d = min(d, float(bd.min()))
        return d


def whitney_decompose(domain: Region, grid: Grid, max_level: int, origin=None,
                      scale: float | None = None) -> WhitneyFamily:
    """Maximal dyadic cubes Q with diam(Q) <= dist(Q, complement), down to max_level."""
    n = domain.ndim
    bb = domain.bounding_box
    origin = np.asarray(bb.lo if origin is None else origin, float)
    scale = float(bb.sides.max() if scale is None else scale)
    J = max_level + 1
    while scale * 2.0 ** -J > grid.h / 2 + 1e-15:
        J += 1
    ext = _Exterior(domain, origin, scale, J)
    if ext.inside.sum() == 0:
        raise EmptyDomainError("domain has empty interior on the sampling lattice")
    accepted, dists = [], []
    active = [(0, (0,) * n)]
    truncated_blocks = 0
    for k in range(max_level + 1):
        nxt = []
        side = scale * 2.0 ** -k
        f = 2 ** (J - k)
        for lev, idx in active:
            ia = np.asarray(idx)
            lo_i, hi_i = ia * f, (ia + 1) * f
            cnt = ext.inside_count(lo_i, hi_i)
            if cnt == 0:
                continue
            if cnt == f ** n:
                lo = origin + ia * side
                hi = lo + side
                d = ext.distance(lo, hi)
                if d * d >= n * side * side:
                    accepted.append(WhitneyCube(k, tuple(int(v) for v in idx), tuple(float(v) for v in origin), scale))
                    dists.append(d)
                    continue
            if k < max_level:
                for ch in product((0, 1), repeat=n):
                    nxt.append((k + 1, tuple(2 * ia + np.asarray(ch))))
            else:
                truncated_blocks += 1
        active = nxt
    order = sorted(range(len(accepted)), key=lambda i: accepted[i].key())
    cubes = [accepted[i] for i in order]
    dists = [dists[i] for i in order]
    # grid cells of the domain not inside any cube
    dm = domain.mask(grid).ravel()
    cov = np.zeros(grid.size, bool)
    for q in cubes:
        cov[Region.box(q.lo, q.hi).cell_indices(grid)] = True
    return WhitneyFamily(cubes, domain=domain, grid=grid, max_level=max_level, origin=tuple(origin),
                         scale=scale, sample_spacing=ext.s, distances=dists,
                         truncated_cells=int(np.count_nonzero(dm & ~cov)),
                         truncated_blocks=truncated_blocks)


def _owner_map(cubes, L):
    n = cubes[0].ndim
    own = -np.ones((2 ** L,) * n, np.int64)
    for i, q in enumerate(cubes):
        lo, hi = q.int_bounds(L)
        own[tuple(slice(a, b) for a, b in zip(lo, hi))] = i
    return own


def _neighbours(cubes, diagonal: bool):
    L = max(q.level for q in cubes)
    own = _owner_map(cubes, L)
    n = cubes[0].ndim
    m = 2 ** L
    if diagonal:
        offs = [np.asarray(o) - 1 for o in product(range(3), repeat=n) if any(v != 1 for v in o)]
    else:
        offs = []
        for ax in range(n):
            for sgn in (-1, 1):
                o = np.zeros(n, int)
                o[ax] = sgn
                offs.append(o)
    out = []
    for i, q in enumerate(cubes):
        lo, hi = q.int_bounds(L)
        # boundary shell of the cube, shifted by each offset
        grids = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
        cells = grids.reshape(-1, n)
        on_shell = np.any((cells == lo) | (cells == hi - 1), axis=1)
        cells = cells[on_shell]
        nb = set()
        for o in offs:
            c = cells + o
            ok = np.all((c >= 0) & (c < m), axis=1)
            ids = own[tuple(c[ok].T)]
            nb.update(int(v) for v in np.unique(ids) if v >= 0 and v != i)
        out.append(sorted(nb))
    return out


def face_neighbours(cubes):
    """Cubes sharing an (n-1)-dimensional piece of boundary."""
    return _neighbours(cubes, diagonal=False)


def touching_neighbours(cubes):
    """Cubes whose closures intersect (faces, edges or corners)."""
    return _neighbours(cubes, diagonal=True)


def _default_root(cubes) -> int:
    lev = min(q.level for q in cubes)
    vols = np.array([q.side ** q.ndim for q in cubes])
    bary = (np.array([q.center for q in cubes]) * vols[:, None]).sum(0) / vols.sum()
    cand = [i for i, q in enumerate(cubes) if q.level == lev]
    return min(cand, key=lambda i: (round(float(np.linalg.norm(cubes[i].center - bary)), 12), cubes[i].key()))


def _shared_face_center(a: WhitneyCube, b: WhitneyCube) -> np.ndarray:
    small, big = (a, b) if a.side <= b.side else (b, a)
    c = small.center.copy()
    for ax in range(a.ndim):
        if np.isclose(small.hi[ax], big.lo[ax]):
            c[ax] = small.hi[ax]
            return c
        if np.isclose(small.lo[ax], big.hi[ax]):
            c[ax] = small.lo[ax]
            return c
    raise ValueError("cubes do not share a face")


def _chain_parents(cubes, root):
    nbrs = face_neighbours(cubes)
    dist = {root: 0}
    dq = deque([root])
    while dq:
        t = dq.popleft()
        for s in nbrs[t]:
            if s not in dist:
                dist[s] = dist[t] + 1
                dq.append(s)
    if len(dist) != len(cubes):
        comps, seen = [], set(dist)
        for i in range(len(cubes)):
            if i in seen:
                continue
            comp, dq = [i], deque([i])
            seen.add(i)
            while dq:
                t = dq.popleft()
                for s in nbrs[t]:
                    if s not in seen:
                        seen.add(s)
                        comp.append(s)
                        dq.append(s)
            comps.append(sorted(comp))
        raise DisconnectedError(f"face graph has {len(comps) + 1} components; "
                                f"unreached: {[c[:5] for c in comps]}")
    parent = [None] * len(cubes)
    for t in range(len(cubes)):
        if t != root:
            parent[t] = min(s for s in nbrs[t] if dist.get(s) == dist[t] - 1)
    return parent, dist


def continuum_connectors(cubes, parent, eps: float = EPS) -> list:
    """Continuum connector cubes: centered at the shared face center, side eps*l_t/4."""
    out = []
    for t, q in enumerate(cubes):
        if parent[t] is None:
            out.append(None)
            continue
        c = _shared_face_center(q, cubes[parent[t]])
        half = eps * q.side / 8
        out.append(Box(c - half, c + half))
    return out


def build_chain_tree(cubes, root: WhitneyCube | int | None = None, grid: Grid | None = None,
                     domain: Region | None = None) -> DomainTree:
    """Tree of minimal face chains from the root, realised on the grid.

    Omega_t is Q_t grown by one cell, B_t the 2^n cells around the shared face center.
    """
    grid = grid if grid is not None else getattr(cubes, "grid", None)
    domain = domain if domain is not None else getattr(cubes, "domain", None)
    if grid is None:
        raise ValueError("a grid is required")
    if not len(cubes):
        raise EmptyDomainError("no cubes")
    if isinstance(root, WhitneyCube):
        root = list(cubes).index(root)
    if root is None:
        root = _default_root(cubes)
    parent, dist = _chain_parents(cubes, root)
    h = grid.h
    lmin = min(q.side for q in cubes)
    if lmin < 4 * h - 1e-12:
        raise ValueError(f"smallest cube side {lmin} is below 4h = {4 * h}; refine the grid")
    omega, b = [], []
    for t, q in enumerate(cubes):
        omega.append(Region.box(q.lo - h, q.hi + h, name=f"Q*{t}"))
        if parent[t] is None:
            b.append(None)
        else:
            c = _shared_face_center(q, cubes[parent[t]])
            b.append(Region.box(c - h, c + h, name=f"B{t}"))
    cubes2 = [replace(q, chain_parent=parent[t]) for t, q in enumerate(cubes)]
    n = cubes[0].ndim
    meta = {"family": "whitney", "cubes": cubes2, "chain_length": dist,
            "M1_theory": 2.0 ** (11 * n), "eps": EPS}
    return DomainTree(parent, omega, b, grid, N=12 ** n, domain=domain, clip_to_cover=True, meta=meta)


def whitney_tree(domain: Region, grid: Grid, max_level: int) -> DomainTree:
    cubes = whitney_decompose(domain, grid, max_level)
    tree = build_chain_tree(cubes, grid=grid, domain=domain)
    tree.meta["family_info"] = {"max_level": max_level, "truncated_cells": cubes.truncated_cells}
    tree.meta["family_cubes"] = cubes
    return tree


@dataclass(frozen=True)
class Shadow:
    node: int
    cells: np.ndarray
    measure: float


def shadows(tree: DomainTree) -> dict:
    """S(Q_t) = union of the grown cubes of the subtree of t, by cell counting."""
    return {t: Shadow(t, tree.w_cells[t], float(tree.w_measure[t])) for t in range(len(tree))}


def shadow_weight(tree: DomainTree, shadow_map: dict | None = None) -> GridFunction:
    """On Q_s: min over cubes Q_k touching Q_s of |Q_k| / |S(Q_k)|.

    Mask cells outside every Q_s (collar cells next to a truncated layer) take the
    min over the grown cubes containing them.
    """
    if shadow_map is None:
        shadow_map = shadows(tree)
    cubes = tree.meta["cubes"]
    g = tree.grid
    n = g.ndim
    ratio = np.array([q.side ** n / shadow_map[t].measure for t, q in enumerate(cubes)])
    nb = touching_neighbours(cubes)
    val = np.array([min([ratio[t]] + [ratio[k] for k in nb[t]]) for t in range(len(cubes))])
    w = np.full(g.size, np.inf)
    inner = np.zeros(g.size, bool)
    for t, q in enumerate(cubes):
        c = Region.box(q.lo, q.hi).cell_indices(g)
        w[c] = val[t]
        inner[c] = True
    for t in range(len(cubes)):
        c = tree.omega_cells[t]
        c = c[~inner[c]]
        w[c] = np.minimum(w[c], val[t])
    w[~tree.mask_flat] = 1.0
    return GridFunction(g, w.reshape(g.shape), tree.mask)


def verify_M1(tree: DomainTree, shadow_map: dict | None = None,
              omega_bar: GridFunction | None = None) -> CheckReport:
    """sup_{Omega_t} omega_bar <= M1 inf_{Omega_t} omega for every node, M1 = 2^(11n)."""
    from .tree_decomp import tree_weight
    if omega_bar is None:
        omega_bar = shadow_weight(tree, shadow_map)
    ob = omega_bar.values.ravel()
    om = tree_weight(tree).values.ravel()
    worst = 0.0
    worst_node = None
    for t, c in enumerate(tree.omega_cells):
        r = ob[c].max() / om[c].min()
        if r > worst:
            worst, worst_node = float(r), t
    M1 = 2.0 ** (11 * tree.grid.ndim)
    return CheckReport("M1", worst <= M1, worst, M1, {"worst_node": worst_node})


def eps_inequality(eps: float = EPS, l: float = 1.0) -> bool:
    return l / 8 - 16 * l * eps / 2 > eps * l / 8


def max_box_overlap(los: np.ndarray, his: np.ndarray) -> int:
    """Maximal number of open boxes sharing a point (sweep over candidate corners)."""
    los = np.asarray(los, float)
    his = np.asarray(his, float)
    if los.shape[1] == 1:
        ev = sorted([(a, 1) for a in los[:, 0]] + [(b, -1) for b in his[:, 0]])
        best = cur = 0
        for _, d in ev:
            cur += d
            best = max(best, cur)
        return best
    best = 0
    for x in np.unique(los[:, 0]):
        act = (los[:, 0] <= x) & (his[:, 0] > x)
        if act.sum() > best:
            best = max(best, max_box_overlap(los[act, 1:], his[act, 1:]))
    return best


def verify_cube_geometry(cubes, parent=None, eps: float = EPS) -> dict:
    """Continuum checks on the cube list (exact on dyadic coordinates).

    Returns a dict of check name -> CheckReport.
    """
    n = cubes[0].ndim
    if parent is None:
        parent = [q.chain_parent for q in cubes]
    lo = np.array([q.lo for q in cubes])
    hi = np.array([q.hi for q in cubes])
    side = np.array([q.side for q in cubes])
    out = {}
    # dyadic disjointness of interiors
    L = max(q.level for q in cubes)
    cnt = np.zeros((2 ** L,) * n, np.int32)
    for q in cubes:
        a, b = q.int_bounds(L)
        cnt[tuple(slice(x, y) for x, y in zip(a, b))] += 1
    out["disjoint_interiors"] = CheckReport("disjoint_interiors", int(cnt.max()) <= 1, float(cnt.max()), 1.0)
    # neighbour comparability
    nb = touching_neighbours(cubes)
    worst = max([max(side[t] / side[k], side[k] / side[t]) for t in range(len(cubes)) for k in nb[t]],
                default=1.0)
    out["neighbour_comparability"] = CheckReport("neighbour_comparability", worst <= 4.0, float(worst), 4.0)
    # expanded overlap
    elo = lo - 0.5 * eps * side[:, None]
    ehi = hi + 0.5 * eps * side[:, None]
    ov = max_box_overlap(elo, ehi)
    out["expanded_overlap"] = CheckReport("expanded_overlap", ov <= 12 ** n, float(ov), float(12 ** n))
    # Q*_s meets Q_t only if the closed cubes touch
    gap_star = np.maximum(0, np.maximum(lo[None] - ehi[:, None], elo[:, None] - hi[None]))
    meets = np.all(np.maximum(elo[:, None], lo[None]) < np.minimum(ehi[:, None], hi[None]), axis=-1)
    touch = np.all(np.maximum(lo[:, None], lo[None]) <= np.minimum(hi[:, None], hi[None]), axis=-1)
    del gap_star
    bad = int(np.count_nonzero(meets & ~touch))
    out["star_meets_implies_touch"] = CheckReport("star_meets_implies_touch", bad == 0, float(bad), 0.0)
    # connectors
    B = continuum_connectors(cubes, parent, eps)
    idx = [t for t in range(len(cubes)) if B[t] is not None]
    if not idx:
        out["connectors_disjoint"] = CheckReport("connectors_disjoint", True, 0.0, 0.0)
        out["connectors_meet_only_two"] = CheckReport("connectors_meet_only_two", True, 0.0, 0.0)
        out["eps_inequality"] = CheckReport("eps_inequality", eps_inequality(eps), 1 / 8 - 8 * eps, eps / 8)
        return out
    blo = np.array([B[t].lo for t in idx])
    bhi = np.array([B[t].hi for t in idx])
    inter = np.all(np.maximum(blo[:, None], blo[None]) < np.minimum(bhi[:, None], bhi[None]), axis=-1)
    np.fill_diagonal(inter, False)
    out["connectors_disjoint"] = CheckReport("connectors_disjoint", not inter.any(),
                                             float(inter.sum() // 2), 0.0)
    hit = np.all(np.maximum(blo[:, None], elo[None]) < np.minimum(bhi[:, None], ehi[None]), axis=-1)
    viol = 0
    for row, t in enumerate(idx):
        s_hit = set(np.flatnonzero(hit[row]).tolist())
        inside = all(np.all(blo[row] >= elo[s]) and np.all(bhi[row] <= ehi[s]) for s in (t, parent[t]))
        if s_hit != {t, parent[t]} or not inside:
            viol += 1
    out["connectors_meet_only_two"] = CheckReport("connectors_meet_only_two", viol == 0, float(viol), 0.0)
    ok = all(eps_inequality(eps, float(s)) for s in np.unique(side))
    out["eps_inequality"] = CheckReport("eps_inequality", ok, 1 / 8 - 8 * eps, eps / 8)
    return out


def verify_distances(cubes, tol: float = 0.0, dist_fn=None) -> CheckReport:
    """diam <= dist <= 4 diam for every cube, with distances from dist_fn or the family."""
    d = np.asarray([dist_fn(q) for q in cubes] if dist_fn else cubes.distances)
    diam = np.array([q.diam for q in cubes])
    lo_ok = d >= diam - tol
    hi_ok = d <= 4 * diam + tol
    worst = float(np.max(d / diam)) if len(d) else 0.0
    return CheckReport("whitney_distance", bool(lo_ok.all() and hi_ok.all()), worst, 4.0,
                       {"min_ratio": float(np.min(d / diam)), "tol": tol})
