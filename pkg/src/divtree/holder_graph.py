"""Cubes piled under the graph of a Hoelder-alpha function.

Patch: Omega_phi = {(x, y): x in (-l/2, l/2)^(n-1), 0 < y < phi(x)}, with phi >= 2l
and min phi < 3l. Cubes are stored in integer units u = l / 2^L so every corner is
exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConnectorError, ProfileViolationError
from .grid_core import Box, Grid, GridFunction, Region
from .tree_decomp import CheckReport, DomainTree, tree_weight

__all__ = [
    "HolderProfile", "power_hump", "flat_graph", "tabulated_holder", "HolderCube", "PiledCubes", "pile_cubes",
    "GraphCloud", "graph_distance", "holder_grid", "holder_domain", "holder_tree", "holder_weights",
    "verify_distance_bracket", "verify_piling", "bracket_constant",
]


def bracket_constant(n: int) -> float:
    return 3.0 * np.sqrt(4 * n - 3)


@dataclass(frozen=True)
class HolderProfile:
    """phi maps an (m, n-1) array of points to m values."""

    phi: Callable
    alpha: float
    K: float
    l: float
    n: int = 2
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        x = np.asarray(x, float)
        if x.ndim == 1:
            x = x[:, None] if self.n == 2 else x[None, :]
        return np.asarray(self.phi(x), float)

    def validate(self, samples: int = 1024, seed: int = 0) -> CheckReport:
        """Sampled Hoelder quotient on (-3l/2, 3l/2)^(n-1), plus 2l <= phi and min phi < 3l."""
        if not 0 < self.alpha <= 1:
            raise ProfileViolationError("alpha must lie in (0, 1]")
        if not 0 < self.l <= 1:
            raise ProfileViolationError("l must lie in (0, 1]")
        d = self.n - 1
        rng = np.random.default_rng(seed)
        L = 1.5 * self.l
        if d == 1:
            grid_pts = np.linspace(-L, L, samples + 1)[:, None]
        else:
            k = int(np.ceil(samples ** (1 / d)))
            ax = np.linspace(-L, L, k + 1)
            grid_pts = np.stack(np.meshgrid(*[ax] * d, indexing="ij"), -1).reshape(-1, d)
        v = self(grid_pts)
        a = rng.uniform(-L, L, (samples, d))
        # short pairs probe the small-scale behaviour
        b = np.clip(a + rng.normal(size=(samples, d)) * self.l * 10.0 ** rng.uniform(-6, 0, (samples, 1)), -L, L)
        a = np.concatenate([a, grid_pts[:-1]])
        b = np.concatenate([b, grid_pts[1:]])
        dist = np.sqrt(((a - b) ** 2).sum(1))
        ok = dist > 0
        q = np.abs(self(a) - self(b))[ok] / dist[ok] ** self.alpha
        qmax = float(q.max()) if q.size else 0.0
        fails = []
        if qmax > self.K * (1 + 1e-9) + 1e-12:
            fails.append(f"Hoelder quotient {qmax:.4g} exceeds K={self.K}")
        if v.min() < 2 * self.l * (1 - 1e-12):
            fails.append(f"min phi {v.min():.4g} below 2l")
        if not v.min() < 3 * self.l:
            fails.append("phi >= 3l everywhere sampled")
        return CheckReport("holder_profile", not fails, qmax, self.K,
                           {"failures": fails, "min_phi": float(v.min())})


def power_hump(l: float = 0.25, alpha: float = 0.5, c: float | None = None, n: int = 2) -> HolderProfile:
    """phi(x) = 2l + c |x|^alpha; |x|^alpha is alpha-Hoelder with constant 1, so K = c."""
    if c is None:
        c = l ** (1 - alpha)

    def phi(x):
        return 2 * l + c * np.sqrt((x ** 2).sum(-1)) ** alpha
    return HolderProfile(phi, alpha, float(c), l, n, "power-hump", {"c": c})


def flat_graph(l: float = 0.25, height: float = 2.5, n: int = 2) -> HolderProfile:
    """phi = height * l everywhere; any alpha works with K = 0."""
    def phi(x):
        return np.full(x.shape[0], height * l)
    return HolderProfile(phi, 1.0, 0.0, l, n, "flat", {"height": height})


def tabulated_holder(xs, ys, alpha: float, K: float, l: float) -> HolderProfile:
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    return HolderProfile(lambda x: np.interp(x[:, 0], xs, ys), alpha, K, l, 2, "tabulated")


@dataclass(frozen=True)
class HolderCube:
    """Q' x (y1, y1 + side) in units u; lo holds the n-1 lower x' corners."""

    level: int
    lo: tuple
    y1: int
    side: int
    parent: int | None

    @property
    def y2(self) -> int:
        return self.y1 + self.side


class PiledCubes(list):
    def __init__(self, cubes, profile: HolderProfile, L: int, **meta):
        super().__init__(cubes)
        self.profile = profile
        self.L = L
        self.unit = profile.l / 2 ** L
        self.meta = meta

    def side(self, t) -> float:
        return self[t].side * self.unit

    def cube_box(self, t) -> Box:
        q, u = self[t], self.unit
        lo = [v * u for v in q.lo] + [q.y1 * u]
        hi = [(v + q.side) * u for v in q.lo] + [q.y2 * u]
        return Box(lo, hi)

    def omega_int(self, t):
        """Integer bounds (in units u/2) of Omega_t; the root is Q_a itself."""
        q = self[t]
        lo = [2 * v for v in q.lo] + [2 * q.y1 - (0 if q.parent is None else q.side)]
        hi = [2 * (v + q.side) for v in q.lo] + [2 * q.y2]
        return lo, hi

    def b_int(self, t):
        q = self[t]
        lo = [2 * v for v in q.lo] + [2 * q.y1 - q.side]
        hi = [2 * (v + q.side) for v in q.lo] + [2 * q.y1]
        return lo, hi

    def level_counts(self) -> list:
        out = {}
        for q in self:
            out[q.level] = out.get(q.level, 0) + 1
        return [out[k] for k in sorted(out)]


def _expanded_inside(profile: HolderProfile, q: HolderCube, unit: float, L: int, samples: int,
                     stats: dict | None = None, max_points: int = 2 ** 20) -> bool:
    """Test 3(Q_t + l_t e_n) inside Omega_{phi,E} from samples of phi on 3Q'_t.

    Accepted when the sampled minimum clears the top by the Hoelder margin K delta^alpha
    (delta = largest distance to a sample), rejected when a sample lies below the top;
    in between the sampling is refined, and at the cap the cube counts as not inside.
    """
    s = q.side
    d = len(q.lo)
    # doubled units keep the centre integral
    half_E = 3 * 2 ** L  # 3l/2 in units u, doubled
    for v in q.lo:
        c2 = 2 * v + s
        if c2 - 3 * s < -half_E or c2 + 3 * s > half_E:
            return False
    top = (q.y2 + 2 * s) * unit
    m = samples
    while True:
        axes = [np.linspace((2 * v + s - 3 * s) / 2, (2 * v + s + 3 * s) / 2, m) * unit for v in q.lo]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
        low = float(profile(X).min())
        if top > low:
            return False
        delta = 0.5 * 3 * s * unit / (m - 1) * np.sqrt(d)
        if top <= low - profile.K * delta ** profile.alpha:
            return True
        if (2 * m - 1) ** d > max_points:
            if stats is not None:
                stats["capped"] = stats.get("capped", 0) + 1
            return False
        if stats is not None:
            stats["refined"] = stats.get("refined", 0) + 1
        m = 2 * m - 1


def pile_cubes(profile: HolderProfile, max_levels: int, min_side: float = 0.0,
               samples: int = 9) -> PiledCubes:
    """Level-by-level piling from Q_a = (-l/2, l/2)^(n-1) x (0, l).

    A cube whose shifted 3-expansion sits inside Omega_{phi,E} gets one child of its
    own side on top; otherwise 2^(n-1) half-side children, emitted only if their side
    is at least ``min_side``.
    """
    L = int(max_levels)
    n = profile.n
    unit = profile.l / 2 ** L
    full = 2 ** L
    x0 = np.zeros((1, n - 1))
    if float(profile(x0)[0]) < profile.l:
        raise ProfileViolationError("root cube is not below the graph")
    root = HolderCube(0, tuple([-full // 2] * (n - 1)), 0, full, None)
    cubes = [root]
    front = [0]
    stop = "max_levels"
    stats = {"refined": 0, "capped": 0}
    for level in range(1, L + 1):
        nxt = []
        for t in front:
            q = cubes[t]
            if _expanded_inside(profile, q, unit, L, samples, stats):
                kids = [HolderCube(level, q.lo, q.y2, q.side, t)]
            else:
                hs = q.side // 2
                if hs * 2 != q.side or hs * unit < min_side * (1 - 1e-12):
                    continue
                kids = [HolderCube(level, tuple(v + o * hs for v, o in zip(q.lo, off)), q.y2, hs, t)
                        for off in product((0, 1), repeat=n - 1)]
            for k in kids:
                nxt.append(len(cubes))
                cubes.append(k)
        if not nxt:
            stop = "min_side"
            break
        front = nxt
    return PiledCubes(cubes, profile, L, stop=stop, samples=samples, min_side=min_side, **stats)


class GraphCloud:
    """Samples of G over (-5l/2, 5l/2)^(n-1) with gaps at most ``spacing`` (n = 2)."""

    def __init__(self, profile: HolderProfile, spacing: float, extent: float = 2.5):
        d = profile.n - 1
        L = extent * profile.l
        k = int(np.ceil(2 * L / spacing))
        if d == 1:
            x = np.linspace(-L, L, k + 1)
            y = profile(x[:, None])
            for _ in range(60):
                gap = np.hypot(np.diff(x), np.diff(y))
                bad = np.flatnonzero(gap > spacing)
                if not len(bad):
                    break
                xm = 0.5 * (x[bad] + x[bad + 1])
                x = np.insert(x, bad + 1, xm)
                y = np.insert(y, bad + 1, profile(xm[:, None]))
            pts = np.stack([x, y], -1)
            self.step = float(np.hypot(np.diff(x), np.diff(y)).max())
        else:
            ax = np.linspace(-L, L, k + 1)
            X = np.stack(np.meshgrid(*[ax] * d, indexing="ij"), -1).reshape(-1, d)
            y = profile(X)
            pts = np.concatenate([X, y[:, None]], 1)
            dy = np.abs(np.diff(y.reshape([k + 1] * d), axis=0)).max()
            self.step = float(np.sqrt(d * (ax[1] - ax[0]) ** 2 + dy ** 2))
        self.points = pts
        self.kd = cKDTree(pts)

    def distance(self, pts) -> np.ndarray:
        return self.kd.query(np.asarray(pts, float))[0]

    def box_distance(self, box: Box) -> float:
        c = box.center
        r0 = float(self.kd.query(c)[0])
        cand = self.kd.query_ball_point(c, r0 + 0.5 * box.diam + 1e-15)
        P = self.points[cand]
        gap = np.maximum(np.maximum(box.lo - P, P - box.hi), 0.0)
        return float(np.sqrt((gap ** 2).sum(1)).min())


def holder_domain(profile: HolderProfile) -> Region:
    l, n = profile.l, profile.n
    d = n - 1
    ax = np.linspace(-l / 2, l / 2, 257)
    X = np.stack(np.meshgrid(*[ax] * d, indexing="ij"), -1).reshape(-1, d)
    top = float(profile(X).max()) * 1.0001

    def inside(p):
        x = p[:, :d]
        return np.all(np.abs(x) < l / 2, axis=1) & (p[:, d] > 0) & (p[:, d] < profile(x))
    return Region.from_predicate(inside, Box([-l / 2] * d + [0.0], [l / 2] * d + [top]), "holder")


def holder_grid(profile: HolderProfile, h: float) -> Grid:
    """Grid aligned with the cube lattice: origin (-l/2, ..., 0)."""
    dom = holder_domain(profile)
    l, d = profile.l, profile.n - 1
    m = int(round(l / h))
    if abs(m * h - l) > 1e-12 * l:
        raise ValueError("l must be an integer multiple of h")
    top = int(np.ceil(dom.bounding_box.hi[-1] / h))
    return Grid(tuple([-l / 2] * d + [0.0]), h, tuple([m] * d + [top]))


def graph_distance(profile: HolderProfile, grid: Grid, cloud: GraphCloud | None = None) -> GridFunction:
    """d_G at cell centres, graph sampled with gaps <= h/2."""
    if cloud is None:
        cloud = GraphCloud(profile, grid.h / 2)
    d = cloud.distance(grid.centers()).reshape(grid.shape)
    return GridFunction(grid, d)


def holder_tree(piled: PiledCubes, grid: Grid) -> DomainTree:
    """Omega_t = Q'_t x (y1 - l_t/2, y2), B_t = Q'_t x (y1 - l_t/2, y1); the root is Q_a."""
    u = piled.unit / 2
    omega, b, parent = [], [], []
    for t, q in enumerate(piled):
        lo, hi = piled.omega_int(t)
        omega.append(Region.box(np.array(lo) * u, np.array(hi) * u, name=f"Omega{t}"))
        if q.parent is None:
            b.append(None)
        else:
            lo, hi = piled.b_int(t)
            b.append(Region.box(np.array(lo) * u, np.array(hi) * u, name=f"B{t}"))
        parent.append(q.parent)
    meta = {"family": "holder", "piled": piled, "alpha": piled.profile.alpha, "K": piled.profile.K,
            "l": piled.profile.l, "level_counts": piled.level_counts()}
    tree = DomainTree(parent, omega, b, grid, N=2, domain=holder_domain(piled.profile),
                      clip_to_cover=True, meta=meta)
    try:
        tree.check_connectors()
    except DegenerateConnectorError as e:
        raise DegenerateConnectorError(f"{e} (smallest side {min(q.side for q in piled) * piled.unit})")
    return tree


def holder_weights(piled: PiledCubes, profile: HolderProfile, grid: Grid, kappa: float, p: float,
                   tree: DomainTree | None = None, cloud: GraphCloud | None = None):
    """(d_G^(1-alpha), d_G^(-kappa), report) on the tree mask.

    The report holds the worst per-node ratio sup_{Omega_t} d_G^(1-alpha) / inf_{Omega_t} omega
    (empirical M1), the exact |B_t| = l_t^n / 2 check and the empirical constant in
    |W_t| <= C (K + l_t^(1-alpha)) l_t^(n-1+alpha).
    """
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if tree is None:
        tree = holder_tree(piled, grid)
    dG = graph_distance(profile, grid, cloud).values
    m = tree.mask
    safe = np.where(m, dG, 1.0)
    if np.any(safe <= 0):
        raise DegenerateConnectorError("a masked cell centre lies on the graph")
    wbar = GridFunction(grid, safe ** (1 - profile.alpha), m)
    what = GridFunction(grid, safe ** (-kappa), m)
    om = tree_weight(tree).values.ravel()
    wb = wbar.values.ravel()
    n = grid.ndim
    dv = grid.cell_measure
    ratios, b_exact, wconst = [], True, 0.0
    for t in range(len(tree)):
        c = tree.omega_cells[t]
        ratios.append(float(wb[c].max() / om[c].min()))
        lt = piled.side(t)
        if t != tree.root:
            b_exact &= len(tree.b_cells[t]) * dv == lt ** n / 2 or abs(
                len(tree.b_cells[t]) * dv - lt ** n / 2) <= 1e-12 * lt ** n
        wconst = max(wconst, tree.w_measure[t] / ((profile.K + lt ** (1 - profile.alpha))
                                                   * lt ** (n - 1 + profile.alpha)))
    M1 = max(ratios)
    rep = CheckReport("holder_weights", bool(np.isfinite(M1) and b_exact), M1, None,
                      {"M1_empirical": M1, "B_measure_exact": bool(b_exact), "W_constant": float(wconst),
                       "kappa": kappa, "p": p, "worst_node": int(np.argmax(ratios))})
    return wbar, what, rep


def verify_distance_bracket(piled: PiledCubes, cloud: GraphCloud) -> CheckReport:
    """l_t <= dist(Q_t, G) <= 3 sqrt(4n-3) l_t, tolerance one sampling step."""
    n = piled.profile.n
    C = bracket_constant(n)
    tol = cloud.step
    lo_r, hi_r, bad = np.inf, 0.0, []
    for t in range(len(piled)):
        lt = piled.side(t)
        d = cloud.box_distance(piled.cube_box(t))
        lo_r = min(lo_r, d / lt)
        hi_r = max(hi_r, d / lt)
        if d < lt - tol or d > C * lt + tol:
            bad.append(t)
    return CheckReport("holder_distance_bracket", not bad, hi_r, C,
                       {"min_ratio": lo_r, "max_ratio": hi_r, "tolerance": tol, "violations": bad[:20]})


def verify_piling(piled: PiledCubes) -> dict:
    """Exact integer checks: disjoint cubes, overlap only parent/child, monotone sides, |B_t|."""
    k = len(piled)
    n = piled.profile.n
    los = np.array([list(q.lo) + [q.y1] for q in piled], np.int64)
    sides = np.array([q.side for q in piled], np.int64)
    his = los + sides[:, None]
    olo = np.array([piled.omega_int(t)[0] for t in range(k)], np.int64)
    ohi = np.array([piled.omega_int(t)[1] for t in range(k)], np.int64)
    parent = [q.parent for q in piled]
    overlap_cubes = 0
    bad_pairs = []
    max_cover = 1
    for t in range(k):
        inter = np.all((los < his[t]) & (his > los[t]), axis=1)
        inter[t] = False
        overlap_cubes += int(inter.sum())
        oi = np.all((olo < ohi[t]) & (ohi > olo[t]), axis=1)
        oi[t] = False
        for s in np.flatnonzero(oi):
            if parent[s] != t and parent[t] != s:
                bad_pairs.append((t, int(s)))
    # the deepest overlap point count is 2 when only parent/child pairs meet
    if not bad_pairs and k > 1:
        max_cover = 2
    mono = all(q.parent is None or q.side <= piled[q.parent].side for q in piled)
    b_exact = all(
        np.prod(np.array(piled.b_int(t)[1]) - np.array(piled.b_int(t)[0])) == piled[t].side ** n * 2 ** n // 2
        for t in range(k) if piled[t].parent is not None)
    return {
        "disjoint_cubes": CheckReport("disjoint_cubes", overlap_cubes == 0, overlap_cubes, 0),
        "overlap_parent_only": CheckReport("overlap_parent_only", not bad_pairs, len(bad_pairs), 0,
                                           {"N": max_cover, "pairs": bad_pairs[:10]}),
        "monotone_sides": CheckReport("monotone_sides", mono),
        "b_measure": CheckReport("b_measure", b_exact, details={"rule": "|B_t| = l_t^n / 2"}),
    }
