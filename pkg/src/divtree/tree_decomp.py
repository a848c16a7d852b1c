"""Rooted-tree coverings and the tree decomposition of integrable functions.

Given subdomains Omega_t indexed by a rooted tree and connector sets B_t inside
Omega_t and its parent, a function f is split as f = sum_t g_t with g_t supported
in Omega_t and (for t != root) of zero mean. The averaging operator T and the
weight omega control the size of the pieces.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import CoverGapError, DegenerateConnectorError, MalformedTreeError
from .grid_core import Grid, GridFunction, Region

__all__ = [
    "DomainTree", "CoverReport", "CheckReport", "DecompositionResult",
    "validate_tree", "partition_of_unity", "decompose", "hardy_tree_operator",
    "tree_weight", "verify_T_bound", "verify_decomposition_bound",
    "T_bound", "C1_constant", "C2_constant", "random_test_functions",
]


def T_bound(p: float, N: float) -> float:
    """Strong (p, p) bound of the tree averaging operator."""
    return 2.0 * (p * N / (p - 1.0)) ** (1.0 / p)


def C1_constant(p: float, N: float) -> float:
    return 2.0 ** p * N * (1.0 + 2.0 ** (p + 1) * p / (p - 1.0))


def C2_constant(p: float, N: float, MI: float, MT: float) -> float:
    return 2.0 ** p * (N * MI ** p + 2.0 * MT ** p)


@dataclass
class CheckReport:
    """Outcome of one bound or invariant check."""

    name: str
    passed: bool
    empirical: float | None = None
    bound: float | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.passed)
        if self.empirical is not None:
            self.empirical = float(self.empirical)
        if self.bound is not None:
            self.bound = float(self.bound)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "empirical": self.empirical,
                "bound": self.bound, "details": self.details}


class DomainTree:
    """Tree of subdomains bound to a grid.

    ``parent[t]`` is the parent index or None for the root. ``omega[t]`` and
    ``b[t]`` are Regions (``b[root]`` is None). The domain mask is the cells of
    ``domain`` (all cells covered by some Omega_t when ``domain`` is None),
    optionally intersected with the covered cells (``clip_to_cover``), which is
    how truncated families drop unresolved boundary layers.
    """

    def __init__(self, parent: Sequence, omega: Sequence[Region], b: Sequence, grid: Grid,
                 N: int, domain: Region | None = None, clip_to_cover: bool = False,
                 meta: dict | None = None, local: Sequence | None = None):
        k = len(parent)
        if k == 0:
            raise MalformedTreeError("tree has no nodes")
        if len(omega) != k or len(b) != k:
            raise MalformedTreeError("parent, omega and b lengths differ")
        self.parent = tuple(None if q is None or q < 0 else int(q) for q in parent)
        roots = [t for t, q in enumerate(self.parent) if q is None]
        if len(roots) != 1:
            raise MalformedTreeError(f"expected one root, found {len(roots)}")
        self.root = roots[0]
        for t, q in enumerate(self.parent):
            if q is not None and not 0 <= q < k:
                raise MalformedTreeError(f"node {t} has unknown parent {q}")
        self.children = [[] for _ in range(k)]
        for t, q in enumerate(self.parent):
            if q is not None:
                self.children[q].append(t)
        order, depth = [self.root], {self.root: 0}
        for t in order:
            for s in self.children[t]:
                depth[s] = depth[t] + 1
                order.append(s)
        if len(order) != k:
            missing = sorted(set(range(k)) - set(order))
            raise MalformedTreeError(f"parent map has a cycle or detached nodes: {missing[:10]}")
        self.bfs_order = order
        self.depth = [depth[t] for t in range(k)]
        self.omega = tuple(omega)
        self.b = tuple(b)
        if self.b[self.root] is not None:
            raise MalformedTreeError("root must not have a connector set")
        for t in range(k):
            if t != self.root and self.b[t] is None:
                raise MalformedTreeError(f"node {t} has no connector set")
        self.grid = grid
        self.N = int(N)
        self.domain = domain
        self.clip_to_cover = clip_to_cover
        self.meta = dict(meta or {})
        self.local = tuple(local) if local is not None else (None,) * k
        self._bind()

    def __len__(self):
        return len(self.parent)

    def _bind(self):
        g = self.grid
        raw = [r.cell_indices(g) for r in self.omega]
        covered = np.zeros(g.size, np.int32)
        for c in raw:
            covered[c] += 1
        if self.domain is None:
            mask = covered > 0
        else:
            mask = self.domain.mask(g).ravel()
            if self.clip_to_cover:
                self.truncated_cells = int(np.count_nonzero(mask & (covered == 0)))
                mask = mask & (covered > 0)
        if not hasattr(self, "truncated_cells"):
            self.truncated_cells = 0
        self.mask_flat = mask
        self.mask = mask.reshape(g.shape)
        self.omega_cells = [c[mask[c]] for c in raw]
        self.b_cells = [np.zeros(0, np.int64) if r is None else (lambda c: c[mask[c]])(r.cell_indices(g))
                        for r in self.b]
        cnt = np.zeros(g.size, np.int32)
        for c in self.omega_cells:
            cnt[c] += 1
        self.cover_count = cnt
        dv = g.cell_measure
        self.b_measure = np.array([dv * len(c) for c in self.b_cells])
        # W_t as sorted unions, built leaves first
        w = [None] * len(self)
        for t in reversed(self.bfs_order):
            parts = [self.omega_cells[t]] + [w[s] for s in self.children[t]]
            w[t] = np.unique(np.concatenate(parts)) if len(parts) > 1 else parts[0]
        self.w_cells = w
        self.w_measure = np.array([dv * len(c) for c in w])
        self.omega_measure = np.array([dv * len(c) for c in self.omega_cells])

    def rebind(self, grid: Grid) -> "DomainTree":
        return DomainTree(self.parent, self.omega, self.b, grid, self.N, self.domain,
                          self.clip_to_cover, self.meta, self.local)

    def post_order(self) -> list:
        return list(reversed(self.bfs_order))

    def ancestors(self, t: int) -> list:
        out = []
        while self.parent[t] is not None:
            t = self.parent[t]
            out.append(t)
        return out

    def subtree(self, t: int) -> list:
        out = [t]
        for s in out:
            out.extend(self.children[s])
        return out

    def check_connectors(self):
        empty = [t for t in range(len(self)) if t != self.root and len(self.b_cells[t]) == 0]
        if empty:
            raise DegenerateConnectorError(
                f"connector sets of nodes {empty[:10]} contain no grid cell; refine the grid")

    def stats(self) -> dict:
        return {
            "nodes": len(self),
            "depth": int(max(self.depth)),
            "N_declared": self.N,
            "N_cover": int(self.cover_count[self.mask_flat].max()) if self.mask_flat.any() else 0,
            "masked_cells": int(self.mask_flat.sum()),
            "truncated_cells": int(self.truncated_cells),
        }


def _on(tree: DomainTree, grid: Grid | None) -> DomainTree:
    if grid is None or grid == tree.grid:
        return tree
    return tree.rebind(grid)


@dataclass
class CoverReport:
    min_cover: int
    max_cover: int
    N: int
    b_nonempty: bool
    b_contained: bool
    b_disjoint: bool
    locally_finite: bool
    max_local_count: int
    uncovered_cells: int
    truncated_cells: int
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def validate_tree(tree: DomainTree, grid: Grid | None = None) -> CoverReport:
    tree = _on(tree, grid)
    g = tree.grid
    m = tree.mask_flat
    cnt = tree.cover_count[m]
    failures = []
    mn = int(cnt.min()) if cnt.size else 0
    mx = int(cnt.max()) if cnt.size else 0
    uncovered = int(np.count_nonzero(cnt == 0))
    if uncovered:
        failures.append(f"{uncovered} masked cells are not covered")
    if mx > tree.N:
        failures.append(f"max cover {mx} exceeds N={tree.N}")
    empty = [t for t in range(len(tree)) if t != tree.root and len(tree.b_cells[t]) == 0]
    if empty:
        failures.append(f"empty connector sets at nodes {empty[:10]}")
    contained = True
    for t in range(len(tree)):
        q = tree.parent[t]
        if q is None:
            continue
        bc = tree.b_cells[t]
        if not (np.isin(bc, tree.omega_cells[t]).all() and np.isin(bc, tree.omega_cells[q]).all()):
            contained = False
            failures.append(f"B_{t} not inside Omega_{t} and its parent")
            break
    bcount = np.zeros(g.size, np.int32)
    for c in tree.b_cells:
        bcount[c] += 1
    disjoint = bool(bcount.max(initial=0) <= 1)
    if not disjoint:
        failures.append("connector sets overlap")
    # local finiteness: number of subdomains meeting each cell's 3^n neighbourhood
    near = np.zeros(g.size, np.int32)
    offs = np.stack(np.meshgrid(*[[-1, 0, 1]] * g.ndim, indexing="ij"), -1).reshape(-1, g.ndim)
    shape = np.asarray(g.shape)
    for c in tree.omega_cells:
        if not len(c):
            continue
        mi = np.stack(np.unravel_index(c, g.shape), -1)
        nb = (mi[:, None, :] + offs[None]).reshape(-1, g.ndim)
        nb = nb[np.all((nb >= 0) & (nb < shape), axis=1)]
        near[np.unique(np.ravel_multi_index(nb.T, g.shape))] += 1
    max_local = int(near[m].max()) if m.any() else 0
    return CoverReport(mn, mx, tree.N, not empty, contained, disjoint, max_local < np.inf,
                       max_local, uncovered, tree.truncated_cells, failures)


def partition_of_unity(tree: DomainTree, grid: Grid | None = None) -> dict:
    """phi_t = indicator(Omega_t) / cover count, as a dict of GridFunctions."""
    tree = _on(tree, grid)
    g = tree.grid
    cnt = tree.cover_count
    if np.any(cnt[tree.mask_flat] == 0):
        raise CoverGapError("some masked cell lies in no subdomain")
    out = {}
    for t, c in enumerate(tree.omega_cells):
        v = np.zeros(g.size)
        v[c] = 1.0 / cnt[c]
        out[t] = GridFunction(g, v.reshape(g.shape), tree.mask)
    return out


class DecompositionResult:
    """Pieces g_t stored compactly on the cells of Omega_t."""

    def __init__(self, tree: DomainTree, f: GridFunction, values: list, phi: list,
                 subtree_integrals: np.ndarray):
        self.tree = tree
        self.f = f
        self.values = values
        self.phi = phi
        self.subtree_integrals = subtree_integrals
        dv = tree.grid.cell_measure
        self.integrals = {t: float(dv * v.sum()) for t, v in enumerate(values)}

    def part(self, t: int) -> GridFunction:
        g = self.tree.grid
        v = np.zeros(g.size)
        v[self.tree.omega_cells[t]] = self.values[t]
        return GridFunction(g, v.reshape(g.shape), self.tree.mask)

    def partition(self, t: int) -> GridFunction:
        g = self.tree.grid
        v = np.zeros(g.size)
        v[self.tree.omega_cells[t]] = self.phi[t]
        return GridFunction(g, v.reshape(g.shape), self.tree.mask)

    @property
    def parts(self) -> Mapping:
        return _LazyParts(self)

    def sum_parts(self) -> np.ndarray:
        """Sum of all g_t scattered to the full grid (flat), in node order."""
        acc = np.zeros(self.tree.grid.size)
        for t, v in enumerate(self.values):
            np.add.at(acc, self.tree.omega_cells[t], v)
        return acc

    def weighted_norms(self, p: float, weight: np.ndarray | None = None) -> np.ndarray:
        """Per node ||g_t||_{L^p(Omega_t, weight)}; weight is a flat array."""
        dv = self.tree.grid.cell_measure
        out = np.empty(len(self.values))
        for t, v in enumerate(self.values):
            w = 1.0 if weight is None else weight[self.tree.omega_cells[t]]
            out[t] = (dv * np.sum(np.abs(v * w) ** p)) ** (1 / p)
        return out


class _LazyParts(Mapping):
    def __init__(self, res):
        self._r = res

    def __getitem__(self, t):
        return self._r.part(t)

    def __iter__(self):
        return iter(range(len(self._r.values)))

    def __len__(self):
        return len(self._r.values)


def _flat_values(f: GridFunction, tree: DomainTree) -> np.ndarray:
    if f.is_vector:
        raise ValueError("decomposition needs a scalar function")
    if f.grid != tree.grid:
        raise ValueError("function and tree live on different grids")
    fv = f.values.ravel()
    off = ~tree.mask_flat & (fv != 0)
    if off.any():
        raise ValueError(f"f is nonzero on {int(off.sum())} cells outside the covered domain")
    return fv


def decompose(f: GridFunction, tree: DomainTree) -> DecompositionResult:
    tree.check_connectors()
    fv = _flat_values(f, tree)
    dv = tree.grid.cell_measure
    cnt = tree.cover_count
    if np.any(cnt[tree.mask_flat] == 0):
        raise CoverGapError("some masked cell lies in no subdomain")
    k = len(tree)
    phi = [1.0 / cnt[c] for c in tree.omega_cells]
    ft = [fv[c] * phi[t] for t, c in enumerate(tree.omega_cells)]
    # subtree integrals I_t = int_{W_t} sum_{k >= t} f_k, accumulated leaves first
    I = np.zeros(k)
    for t in tree.post_order():
        I[t] = dv * ft[t].sum() + sum(I[s] for s in tree.children[t])
    g = [v.copy() for v in ft]
    for t in range(k):
        q = tree.parent[t]
        if q is None:
            continue
        avg = I[t] / tree.b_measure[t]
        bc = tree.b_cells[t]
        for node, sign in ((t, -1.0), (q, 1.0)):
            oc = tree.omega_cells[node]
            pos = np.searchsorted(oc, bc)
            if np.any(pos >= len(oc)) or np.any(oc[np.minimum(pos, len(oc) - 1)] != bc):
                raise MalformedTreeError(f"B_{t} is not contained in Omega_{node}")
            g[node][pos] += sign * avg
    return DecompositionResult(tree, f, g, phi, I)


def hardy_tree_operator(f: GridFunction, tree: DomainTree) -> GridFunction:
    """Tf = sum_{t != root} chi_{B_t} |W_t|^{-1} int_{W_t} |f|."""
    fv = np.abs(_flat_values(f, tree))
    dv = tree.grid.cell_measure
    out = np.zeros(tree.grid.size)
    for t in range(len(tree)):
        if t == tree.root:
            continue
        wc = tree.w_cells[t]
        out[tree.b_cells[t]] += dv * fv[wc].sum() / tree.w_measure[t]
    return GridFunction(tree.grid, out.reshape(tree.grid.shape), tree.mask)


def tree_weight(tree: DomainTree, grid: Grid | None = None) -> GridFunction:
    """omega = |B_t| / |W_t| on B_t, 1 on the rest of the mask."""
    tree = _on(tree, grid)
    w = np.ones(tree.grid.size)
    for t in range(len(tree)):
        if t != tree.root:
            w[tree.b_cells[t]] = tree.b_measure[t] / tree.w_measure[t]
    return GridFunction(tree.grid, w.reshape(tree.grid.shape), tree.mask)


def random_test_functions(tree: DomainTree, trials: int, seed: int = 0, zero_mean: bool = True):
    """Yield flat arrays mixing white noise, subtree bursts and single-subdomain spikes."""
    rng = np.random.default_rng(seed)
    m = tree.mask_flat
    idx = np.flatnonzero(m)
    dv = tree.grid.cell_measure
    k = len(tree)
    for i in range(trials):
        kind = i % 3
        v = np.zeros(tree.grid.size)
        if kind == 0:
            v[idx] = rng.uniform(-1, 1, idx.size)
        elif kind == 1:
            t = int(rng.integers(k))
            c = tree.w_cells[t]
            v[c] = rng.uniform(-1, 1, c.size) + rng.choice([-1.0, 1.0]) * 2.0
            v[idx] += 0.01 * rng.uniform(-1, 1, idx.size)
        else:
            t = int(rng.integers(k))
            c = tree.omega_cells[t]
            v[c] = rng.uniform(0.5, 1.5, c.size)
        if zero_mean:
            v[idx] -= v[idx].sum() * dv / (dv * idx.size)
        yield v


def _norm_p(v, w, p, dv):
    return (dv * np.sum(np.abs(v * w) ** p)) ** (1 / p)


def verify_T_bound(tree: DomainTree, p: float, trials: int = 100, seed: int = 0,
                   weight_in: np.ndarray | None = None, weight_out: np.ndarray | None = None,
                   extra: Sequence[np.ndarray] = ()) -> CheckReport:
    """Max of ||Tf||_p / ||f||_p over random f against 2(pN/(p-1))^(1/p).

    N is the observed maximal cover count (condition (a) holds with it); the bound
    with the declared N is reported too. Optional flat weights give the weighted ratio
    ||Tf w_out|| / ||f w_in|| (no theoretical bound is then asserted).
    """
    if not p > 1:
        raise ValueError("p must be > 1")
    m = tree.mask_flat
    dv = tree.grid.cell_measure
    wi = np.ones(tree.grid.size) if weight_in is None else weight_in
    wo = np.ones(tree.grid.size) if weight_out is None else weight_out
    worst = 0.0
    count = 0
    fs = list(random_test_functions(tree, trials, seed, zero_mean=False)) + [np.asarray(e) for e in extra]
    for v in fs:
        nf = _norm_p(v[m], wi[m], p, dv)
        if nf == 0:
            continue
        Tf = hardy_tree_operator(GridFunction(tree.grid, v.reshape(tree.grid.shape), tree.mask), tree)
        r = _norm_p(Tf.values.ravel()[m], wo[m], p, dv) / nf
        worst = max(worst, r)
        count += 1
    n_cover = tree.stats()["N_cover"]
    weighted = weight_in is not None or weight_out is not None
    bound = None if weighted else T_bound(p, n_cover)
    passed = bool(np.isfinite(worst)) if weighted else worst <= bound
    return CheckReport("T_bound", passed, float(worst), bound,
                       {"p": p, "trials": count, "N_cover": n_cover, "N_declared": tree.N,
                        "bound_declared_N": T_bound(p, tree.N), "weighted": weighted})


def verify_decomposition_bound(f: GridFunction, tree: DomainTree, p: float,
                               hat_w1: GridFunction | None = None, hat_w2: GridFunction | None = None,
                               T_trials: int = 30, seed: int = 0) -> CheckReport:
    """sum_t ||g_t||^p_{L^p(Omega_t, omega w1)} <= C ||f||^p_{L^p(w2)}.

    Unweighted: C = C1 with the observed cover count. Weighted: C = C2 with
    M_I = sup w1/w2 and an empirical M_T that includes this very f, which keeps
    the chain of inequalities valid for f.
    """
    res = decompose(f, tree)
    m = tree.mask_flat
    dv = tree.grid.cell_measure
    om = tree_weight(tree).values.ravel()
    w1 = np.ones(tree.grid.size) if hat_w1 is None else hat_w1.values.ravel()
    w2 = np.ones(tree.grid.size) if hat_w2 is None else hat_w2.values.ravel()
    lhs = float(np.sum(res.weighted_norms(p, om * w1) ** p))
    fv = f.values.ravel()
    rhs_norm = dv * np.sum(np.abs(fv[m] * w2[m]) ** p)
    n_cover = tree.stats()["N_cover"]
    details = {"p": p, "N_cover": n_cover, "lhs": lhs, "f_norm_p": float(rhs_norm)}
    if hat_w1 is None and hat_w2 is None:
        C = C1_constant(p, n_cover)
        details["C1_declared_N"] = C1_constant(p, tree.N)
    else:
        MI = float(np.max(w1[m] / w2[m]))
        Trep = verify_T_bound(tree, p, T_trials, seed, weight_in=w2, weight_out=w1, extra=[fv])
        MT = Trep.empirical
        C = C2_constant(p, n_cover, MI, MT)
        details.update({"M_I": MI, "M_T": MT})
    rhs = C * rhs_norm
    ratio = lhs / rhs if rhs > 0 else 0.0
    details["C"] = C
    return CheckReport("decomposition_bound", bool(lhs <= rhs), ratio, 1.0, details)
