"""Global solve: decompose f over a tree, solve div u_t = g_t per node, sum.

Each node is solved on its own refined lattice (the coarse cells of Omega_t split
r times per axis, g_t piecewise constant). The local fields are face fluxes; they
are averaged onto the coarse faces and summed, so the composite divergence is the
coarse flux balance. Du_t is averaged back onto the coarse cells.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BoundViolation, MeanViolationError
from .grid_core import Box, Grid, GridFunction, Region, StaggeredField, divergence_fd
from .local_div import MAX_CELLS, MEAN_TOL, lattice_operator
from .tree_decomp import (CheckReport, DomainTree, T_bound, decompose, tree_weight, verify_T_bound)

__all__ = [
    "SolveReport", "solve_divergence", "unweighted_divp_check", "operator_T_weighted_check",
    "theorem_constant", "corollary_constant", "single_node_tree", "finite_cover_tree",
    "refine_factor", "random_f",
]


def theorem_constant(p: float, N: float, M1: float, M2: float, MT: float) -> float:
    """C = 2 N M1 M2 (N + 2 MT^p)^(1/p)."""
    return 2.0 * N * M1 * M2 * (N + 2.0 * MT ** p) ** (1.0 / p)


def corollary_constant(p: float, N: float, M1: float, M2: float) -> float:
    """2 M1 M2 N^(1+1/p) (1 + 2^(p+1) p/(p-1))^(1/p)."""
    return 2.0 * M1 * M2 * N ** (1 + 1 / p) * (1 + 2 ** (p + 1) * p / (p - 1)) ** (1 / p)


@dataclass
class SolveReport:
    p: float
    N: int
    M1: float
    M2: float
    MT: float
    C_theory: float
    C_emp: float | None
    residual: float
    residual_fd: float
    passed: bool
    constants: dict = field(default_factory=dict)
    per_node: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    tree_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        consts = {"N": self.N, "M1": self.M1, "M2": self.M2, "MT": self.MT,
                  "C_theory": self.C_theory, "C_emp": self.C_emp}
        consts.update(self.constants)
        return {
            "config": self.config,
            "grid": self.grid,
            "tree_stats": self.tree_stats,
            "constants": _plain(consts),
            "residual": {"composite": self.residual, "fd": self.residual_fd},
            "passed": bool(self.passed),
            "checks": {k: _plain(v.to_dict() if hasattr(v, "to_dict") else v) for k, v in self.checks.items()},
            "per_node": _plain(self.per_node),
        }


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    return x


def refine_factor(cells: int, n: int, target: int = 2048) -> int:
    if cells > MAX_CELLS:
        raise ValueError(f"subdomain has {cells} cells, above the local cap {MAX_CELLS}; coarsen or split it")
    r = max(1, int(np.floor((target / cells) ** (1.0 / n) + 1e-9)))
    while r > 1 and cells * r ** n > MAX_CELLS:
        r -= 1
    return r


def _ball_hint(tree: DomainTree, t: int):
    loc = tree.local[t]
    if loc is not None and hasattr(loc, "center"):
        return np.asarray(loc.center, float), float(loc.radius)
    reg = tree.omega[t]
    if reg.kind == "box":
        b = reg.boxes[0]
        return b.center, float(b.sides.min()) / 2
    return None


def _ball_cells(fmask: np.ndarray, origin, hf: float, c, rad) -> np.ndarray:
    ax = [origin[i] + hf * (np.arange(s) + 0.5) for i, s in enumerate(fmask.shape)]
    d2 = sum(((a - c[i]) ** 2).reshape([-1 if j == i else 1 for j in range(fmask.ndim)])
             for i, a in enumerate(ax))
    return d2 < rad * rad


def _choose_ball(fmask, origin, hf, hint):
    """Use the hint if its cells sit in the mask, shrinking it; else the largest inscribed ball."""
    if hint is not None:
        c, rad = hint
        for _ in range(10):
            b = _ball_cells(fmask, origin, hf, c, rad)
            if b.any() and not np.any(b & ~fmask):
                return c, rad, "hint"
            rad *= 0.8
    dist = ndimage.distance_transform_edt(fmask)
    k = np.unravel_index(int(np.argmax(dist)), fmask.shape)
    c = np.asarray(origin) + hf * (np.asarray(k) + 0.5)
    rad = max(float(dist[k]) - 0.5, 0.5) * hf
    return c, rad, "inscribed"


def _restrict(a: np.ndarray, r: int) -> np.ndarray:
    if r == 1:
        return a
    shp = []
    for s in a.shape:
        shp += [s // r, r]
    return a.reshape(shp).mean(axis=tuple(range(1, 2 * a.ndim, 2)))


def _prolong(a: np.ndarray, r: int) -> np.ndarray:
    if r == 1:
        return a
    for ax in range(a.ndim):
        a = np.repeat(a, r, axis=ax)
    return a


def _faces_supported(sf: StaggeredField, mask: np.ndarray) -> bool:
    """Normal components vanish on every face with no masked cell on either side."""
    for i, a in enumerate(sf.faces):
        pad = [(1, 1) if k == i else (0, 0) for k in range(mask.ndim)]
        mp = np.pad(mask, pad)
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[i] = slice(None, -1)
        hi[i] = slice(1, None)
        touch = mp[tuple(lo)] | mp[tuple(hi)]
        if np.any(a[~touch] != 0):
            return False
    return True


def _wnorm(v, w, p, dv):
    """(dv sum |v w|^p)^(1/p) with v of shape (..., cells)."""
    a = np.abs(v * w) ** p
    return float((dv * a.sum()) ** (1.0 / p))


def solve_divergence(f: GridFunction, tree: DomainTree, weights=None, p: float = 2.0,
                     local_cells: int = 2048, refine: int | None = None, m1_theory: float | None = None,
                     T_trials: int = 30, seed: int = 0, residual_tol: float = 0.15):
    """u = sum_t u_t with div u_t = g_t on Omega_t, and the weighted estimate report.

    ``weights`` is (omega_bar, hat_w) as GridFunctions or None for both 1.
    """
    if not p > 1:
        raise ValueError("p must be > 1")
    g = tree.grid
    n = g.ndim
    dv = g.cell_measure
    m = tree.mask_flat
    fv = np.where(m, f.values.ravel(), 0.0)
    l1 = float(np.abs(fv).sum() * dv)
    mean = float(fv.sum() * dv)
    if abs(mean) > MEAN_TOL * max(l1, 1e-300):
        raise MeanViolationError(f"f has integral {mean:.3e} against L1 norm {l1:.3e}")
    if weights is None:
        wbar = np.ones(g.size)
        what = np.ones(g.size)
        unweighted = True
    else:
        wbar = np.where(m, weights[0].values.ravel(), 1.0)
        what = np.where(m, weights[1].values.ravel(), 1.0)
        unweighted = bool(np.all(what[m] == 1.0))
        if np.any(what[m] <= 0) or np.any(wbar[m] <= 0) or not np.all(np.isfinite(what[m] * wbar[m])):
            from .errors import InvalidWeightError
            raise InvalidWeightError("weights must be positive and finite on the mask")
    fgf = GridFunction(g, fv.reshape(g.shape), tree.mask)
    res = decompose(fgf, tree)

    faces = StaggeredField.zeros(g, tree.mask)
    DU = np.zeros((n * n, g.size))
    per_node = []
    M2 = 0.0
    for t in range(len(tree)):
        cells = tree.omega_cells[t]
        gv = res.values[t]
        coords = np.stack(np.unravel_index(cells, g.shape), -1)
        lo = coords.min(axis=0)
        shape_c = tuple(coords.max(axis=0) - lo + 1)
        cmask = np.zeros(shape_c, bool)
        rel = tuple((coords - lo).T)
        cmask[rel] = True
        gc = np.zeros(shape_c)
        gc[rel] = gv
        r = refine if refine is not None else refine_factor(len(cells), n, local_cells)
        hf = g.h / r
        fmask = _prolong(cmask, r)
        gf = _prolong(gc, r)
        origin = np.asarray(g.origin) + lo * g.h
        c, rad, how = _choose_ball(fmask, origin, hf, _ball_hint(tree, t))
        fcells = np.flatnonzero(fmask.ravel())
        fcoords = np.stack(np.unravel_index(fcells, fmask.shape), -1)
        c_hat = (c - origin) / hf - 0.5
        gnorm = _wnorm(gv, what[cells], p, dv)
        node = {"node": t, "cells": int(len(cells)), "refine": int(r), "ball_center": c.tolist(),
                "ball_radius": float(rad), "ball_source": how, "g_integral": float(gv.sum() * dv),
                "g_norm": gnorm}
        if not np.any(gv):
            node.update({"du_norm": 0.0, "M2": None, "residual": 0.0})
            per_node.append(node)
            continue
        op = lattice_operator(fcoords, c_hat, rad / hf)
        vals = hf * op.apply(gf.ravel()[fcells])
        base = fcoords.min(axis=0)
        fine_faces = []
        for i in range(n):
            arr = np.zeros(tuple(s_ + (1 if k == i else 0) for k, s_ in enumerate(fmask.shape)))
            arr[tuple((op.face_index[i] + base).T)] = vals[op.faces[i]]
            fine_faces.append(arr)
        fgrid = Grid(tuple(origin), hf, fmask.shape)
        sf = StaggeredField(fgrid, fine_faces, fmask)
        resid = np.where(fmask, sf.divergence().values - gf, 0.0)
        du = sf.gradient().values
        coarse = sf.restrict(r, Grid(tuple(origin), g.h, shape_c), cmask)
        for i in range(n):
            sl = tuple(slice(lo[k], lo[k] + coarse.faces[i].shape[k]) for k in range(n))
            faces.faces[i][sl] += coarse.faces[i]
        duc = np.stack([_restrict(du[k], r) for k in range(n * n)])
        DU[:, cells] += duc[(slice(None),) + rel]
        dun = _wnorm(duc[(slice(None),) + rel], what[cells], p, dv)
        m2 = dun / gnorm if gnorm > 0 else 0.0
        M2 = max(M2, m2)
        rl = float(np.sqrt((resid ** 2).sum() / max((gf[fmask] ** 2).sum(), 1e-300)))
        node.update({"du_norm": dun, "M2": m2, "residual": rl})
        per_node.append(node)

    fnorm2 = float(np.sqrt((fv[m] ** 2).sum()))
    RES = np.where(m, faces.divergence().values.ravel() - fv, 0.0)
    residual = float(np.sqrt((RES[m] ** 2).sum()) / fnorm2) if fnorm2 > 0 else 0.0
    ugf = faces.cell_average()
    U = ugf.values.reshape(n, -1)
    dfd = divergence_fd(ugf).values.ravel()
    residual_fd = float(np.sqrt(((dfd - fv)[m] ** 2).sum()) / fnorm2) if fnorm2 > 0 else 0.0

    # condition (d): sup omega_bar <= M1 inf omega on every Omega_t
    om = tree_weight(tree).values.ravel()
    M1_emp = max(float(wbar[c].max() / om[c].min()) for c in tree.omega_cells)
    checks = {}
    if m1_theory is not None:
        checks["M1"] = CheckReport("M1", M1_emp <= m1_theory, M1_emp, m1_theory)
        M1 = float(m1_theory)
    else:
        M1 = M1_emp
    N = tree.N
    n_cover = tree.stats()["N_cover"]
    if unweighted:
        MT = T_bound(p, N)
        MT_emp = None
    else:
        trep = verify_T_bound(tree, p, T_trials, seed, weight_in=what, weight_out=what, extra=[fv])
        MT = MT_emp = trep.empirical
        checks["T_weighted"] = trep
    C_theory = theorem_constant(p, N, M1, M2, MT)
    MT_obs = T_bound(p, n_cover) if unweighted else MT
    C_obs = theorem_constant(p, n_cover, M1_emp, M2, MT_obs)
    fn = _wnorm(fv[m], what[m], p, dv)
    if fn > 0:
        C_emp = _wnorm(DU[:, m], (wbar * what)[m], p, dv) / fn
    else:
        C_emp = None
    support_ok = bool(np.all(U[:, ~m] == 0)) and _faces_supported(faces, tree.mask)
    checks["estimate"] = CheckReport("estimate", C_emp is None or C_emp <= C_theory, C_emp, C_theory)
    checks["estimate_observed_constants"] = CheckReport(
        "estimate_observed_constants", C_emp is None or C_emp <= C_obs, C_emp, C_obs)
    checks["residual"] = CheckReport("residual", residual <= residual_tol, residual, residual_tol)
    checks["support"] = CheckReport("support", support_ok)
    passed = all(checks[k].passed for k in ("estimate", "residual", "support"))
    rep = SolveReport(
        p=float(p), N=int(N), M1=M1, M2=float(M2), MT=float(MT), C_theory=float(C_theory),
        C_emp=None if C_emp is None else float(C_emp), residual=residual, residual_fd=residual_fd,
        passed=passed,
        constants={"M1_empirical": M1_emp, "M1_theory": m1_theory, "MT_empirical": MT_emp,
                   "N_cover": n_cover, "C_theory_observed": C_obs,
                   "mean_defect_root": float(res.values[tree.root].sum() * dv)},
        per_node=per_node, checks=checks, grid=g.to_dict(), tree_stats=tree.stats(),
        config={"p": float(p), "local_cells": local_cells, "refine": refine, "T_trials": T_trials,
                "seed": seed, "residual_tol": residual_tol, "weighted": not unweighted},
    )
    rep.u = ugf
    rep.faces = faces
    rep.residual_field = GridFunction(g, RES.reshape(g.shape), tree.mask)
    rep.du = GridFunction(g, DU.reshape((n * n,) + g.shape), tree.mask)
    return ugf, rep


def unweighted_divp_check(f: GridFunction, tree: DomainTree, p: float = 2.0, M1: float | None = None,
                          **kw) -> SolveReport:
    """Solve with both weights 1 and compare against the (div)_p constant bound.

    Requires omega >= 1/M1 on the mask; M1 defaults to 1 / min omega.
    """
    om = tree_weight(tree).values.ravel()
    m = tree.mask_flat
    wmin = float(om[m].min())
    if M1 is None:
        M1 = 1.0 / wmin
    elif wmin < 1.0 / M1 * (1 - 1e-12):
        bad = [t for t in range(len(tree)) if t != tree.root
               and len(tree.b_cells[t]) and tree.b_measure[t] / tree.w_measure[t] < 1.0 / M1]
        raise BoundViolation(f"omega >= 1/M1 fails on B_t for nodes {bad[:10]}")
    u, rep = solve_divergence(f, tree, None, p, **kw)
    C = corollary_constant(p, tree.N, M1, rep.M2)
    rep.constants["C_corollary"] = C
    rep.constants["M1_corollary"] = M1
    rep.checks["corollary"] = CheckReport("corollary", rep.C_emp is None or rep.C_emp <= C * (1 + 1e-12),
                                          rep.C_emp, C)
    rep.passed = rep.passed and rep.checks["corollary"].passed
    return rep


def operator_T_weighted_check(tree: DomainTree, hat_w: GridFunction | None, p: float = 2.0,
                              trials: int = 100, seed: int = 0) -> CheckReport:
    """||Tg||_{L^p(w)} / ||g||_{L^p(w)} over random g; for w = 1 against 2(pN/(p-1))^(1/p)."""
    if hat_w is None:
        return verify_T_bound(tree, p, trials, seed)
    w = np.where(tree.mask_flat, hat_w.values.ravel(), 1.0)
    if np.all(w[tree.mask_flat] == 1.0):
        return verify_T_bound(tree, p, trials, seed)
    return verify_T_bound(tree, p, trials, seed, weight_in=w, weight_out=w)


def single_node_tree(region: Region, grid: Grid, ball=None) -> DomainTree:
    """Root-only tree; the optional ball (anything with center, radius) drives the local solve."""
    return DomainTree([None], [region], [None], grid, N=1, local=[ball])


def _intersect(a: Region, b: Region) -> Region:
    lo = np.maximum(a.bounding_box.lo, b.bounding_box.lo)
    hi = np.maximum(np.minimum(a.bounding_box.hi, b.bounding_box.hi), lo)
    if a.kind == "box" and b.kind == "box":
        return Region.box(lo, hi)
    return Region.from_predicate(lambda p: a.contains(p) & b.contains(p), Box(lo, hi))


def finite_cover_tree(core: Region, patches, grid: Grid, connectors=None, balls=None) -> DomainTree:
    """Two-level tree: root ``core``, every patch a child; B_i = patch cap core unless given."""
    k = len(patches)
    parent = [None] + [0] * k
    omega = [core] + list(patches)
    b = [None] + (list(connectors) if connectors is not None else [_intersect(p_, core) for p_ in patches])
    count = np.zeros(grid.size, np.int32)
    for r in omega:
        count[r.cell_indices(grid)] += 1
    N = max(int(count.max()), 1)
    return DomainTree(parent, omega, b, grid, N=N, local=balls,
                      meta={"family": "finite-cover", "patches": k})


def random_f(grid: Grid, mask: np.ndarray, seed: int = 0, kind: str = "random", modes: int = 3,
             value: float = 1.0) -> GridFunction:
    """Zero-mean test data on the mask.

    "random": cellwise uniform on [-1, 1]; "modes": random cosine modes up to ``modes``
    per axis over the mask's bounding box; "constant": ``value`` (not mean-corrected).
    """
    rng = np.random.default_rng(seed)
    mask = np.asarray(mask, bool).reshape(grid.shape)
    if kind == "random":
        v = rng.uniform(-1, 1, grid.shape)
    elif kind == "modes":
        X = grid.mesh()
        idx = np.argwhere(mask)
        lo = np.asarray(grid.origin) + grid.h * idx.min(0)
        span = grid.h * (idx.max(0) - idx.min(0) + 1)
        v = np.zeros(grid.shape)
        for k in np.ndindex(*([modes + 1] * grid.ndim)):
            if not any(k):
                continue
            term = rng.normal() / (1.0 + sum(k))
            for i, ki in enumerate(k):
                term = term * np.cos(np.pi * ki * (X[i] - lo[i]) / span[i])
            v = v + term
    elif kind == "constant":
        return GridFunction(grid, np.where(mask, float(value), 0.0), mask)
    else:
        raise ValueError(f"unknown f kind {kind!r}")
    v = np.where(mask, v, 0.0)
    v[mask] -= v[mask].mean()
    return GridFunction(grid, v, mask)
