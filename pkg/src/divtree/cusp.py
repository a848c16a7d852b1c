"""External cusps Omega_phi = {(x, y): 0 < x < a, |y| < phi(x)}, y in R^(n-1).

The profile generates a decreasing sequence x_0 = a > x_1 > ... with
phi(x_{i+1}) = x_i - x_{i+1}; consecutive slabs form a path tree with overlap 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContainmentError, DegenerateConnectorError, ProfileViolationError
from .grid_core import Box, Grid, GridFunction, Region
from .local_div import StarRegion, _sphere_rule, star_test_cells
from .tree_decomp import CheckReport, DomainTree

__all__ = [
    "CuspProfile", "power_profile", "exp_cusp_profile", "oscillating_profile", "tabulated_profile",
    "cusp_sequence", "cusp_cover", "cusp_domain", "varpi_weight", "star_split", "galdi_constant_bound",
    "min_star_m", "Ball", "ball_hint", "node_ball", "verify_star_split", "comparability_check",
]


@dataclass(frozen=True)
class CuspProfile:
    phi: Callable
    a: float
    K1: float
    K2: float
    name: str = "custom"
    verified: bool = True
    params: dict = field(default_factory=dict)
    logphi: Callable | None = None

    def __call__(self, x):
        return self.phi(np.asarray(x, float))

    def validate(self, samples: int = 1024, tol: float = 1e-9) -> CheckReport:
        """Sampled checks of phi(0) = 0, phi > 0, |phi'| <= K1, phi(t)/t <= K2 phi(r)/r."""
        x = np.linspace(0, self.a, samples + 1)
        v = self(x)
        fails = []
        if abs(float(self(np.array([0.0]))[0])) > tol:
            fails.append("phi(0) != 0")
        # log-space where phi underflows double precision
        if self.logphi is not None:
            lv = self.logphi(x[1:])
        else:
            with np.errstate(divide="ignore"):
                lv = np.log(np.where(v[1:] > 0, v[1:], 0.0))
        if np.any(~np.isfinite(lv)) or np.any(v[1:] < 0):
            fails.append("phi not positive on (0, a]")
        slope = np.abs(np.diff(v) / np.diff(x))
        if slope.max() > self.K1 * (1 + 1e-9) + tol:
            fails.append(f"difference quotient {slope.max():.4g} exceeds K1={self.K1}")
        lratio = lv - np.log(x[1:])
        # worst case of (phi(t)/t) / (phi(r)/r) over t < r is a running maximum
        runmax = np.maximum.accumulate(lratio)
        q = float(np.exp(np.max(runmax - lratio))) if np.all(np.isfinite(lratio)) else float("inf")
        if q > self.K2 * (1 + 1e-9):
            fails.append(f"quasi-monotonicity ratio {q:.4g} exceeds K2={self.K2}")
        return CheckReport("profile", not fails, float(max(slope.max() / self.K1, q / self.K2)), 1.0,
                           {"failures": fails, "max_slope": float(slope.max()), "max_ratio": q})


def power_profile(gamma: float = 2.0, a: float = 1.0) -> CuspProfile:
    if gamma <= 1:
        raise ProfileViolationError("a cusp needs gamma > 1")
    K1 = gamma * a ** (gamma - 1)
    return CuspProfile(lambda x: np.abs(x) ** gamma, a, max(K1, 1.0), 1.0, f"power{gamma:g}",
                       params={"gamma": gamma})


def exp_cusp_profile(a: float = 1.0) -> CuspProfile:
    def phi(x):
        x = np.asarray(x, float)
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0) ** 2), 0.0)
    return CuspProfile(phi, a, 1.0, 1.0, "exp-cusp", logphi=lambda x: -1.0 / np.asarray(x, float) ** 2)


def oscillating_profile(gamma: float = 2.0, a: float = 1.0) -> CuspProfile:
    """x^g (2 + sin x^(1-g)); K1, K2 are analytic upper estimates, not tight values."""
    def phi(x):
        x = np.asarray(x, float)
        xs = np.where(x > 0, x, 1.0)
        return np.where(x > 0, xs ** gamma * (2 + np.sin(xs ** (1 - gamma))), 0.0)
    K1 = 3 * gamma * a ** (gamma - 1) + (gamma - 1)
    return CuspProfile(phi, a, K1, 3.0, f"oscillating{gamma:g}", verified=False, params={"gamma": gamma})


def tabulated_profile(xs, ys, K1: float, K2: float) -> CuspProfile:
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    return CuspProfile(lambda x: np.interp(x, xs, ys), float(xs[-1]), K1, K2, "tabulated")


def cusp_sequence(profile: CuspProfile, depth: int) -> list:
    """x_0 = a and x_{i+1} = largest root in (0, x_i) of phi(x) + x - x_i."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    xs = [float(profile.a)]
    for _ in range(depth):
        xi = xs[-1]
        step = xi / 1024
        grid = xi - step * np.arange(1, 1025)
        g = profile(grid) + grid - xi
        hit = np.flatnonzero(g <= 0)
        if not len(hit):
            raise ProfileViolationError(f"no root of phi(x) = {xi} - x bracketed")
        k = hit[0]
        lo = grid[k]
        hi = lo + step
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if float(profile(np.array([mid]))[0]) + mid - xi <= 0:
                lo = mid
            else:
                hi = mid
        root = hi if abs(float(profile(np.array([hi]))[0]) + hi - xi) < abs(
            float(profile(np.array([lo]))[0]) + lo - xi) else lo
        if not 0 < root < xi:
            raise ProfileViolationError("sequence failed to decrease")
        xs.append(float(root))
    return xs


def cusp_domain(profile: CuspProfile, n: int = 2) -> Region:
    a = profile.a
    ymax = float(np.max(profile(np.linspace(0, a, 4097)))) * 1.0001 + 1e-12

    def inside(p):
        x = p[:, 0]
        r = np.sqrt((p[:, 1:] ** 2).sum(axis=1))
        return (x > 0) & (x < a) & (r < profile(x))
    bb = Box([0.0] + [-ymax] * (n - 1), [a] + [ymax] * (n - 1))
    return Region.from_predicate(inside, bb, name=f"cusp-{profile.name}")


def _slab(profile, x0, x1, n, name=""):
    ymax = float(np.max(profile(np.linspace(x0, x1, 257)))) * 1.0001 + 1e-12

    def inside(p):
        x = p[:, 0]
        r = np.sqrt((p[:, 1:] ** 2).sum(axis=1))
        return (x > x0) & (x < x1) & (r < profile(x))
    bb = Box([x0] + [-ymax] * (n - 1), [x1] + [ymax] * (n - 1))
    return Region.from_predicate(inside, bb, name=name)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def region(self) -> Region:
        c = np.asarray(self.center, float)
        r = self.radius
        return Region.from_predicate(lambda p: ((p - c) ** 2).sum(1) < r * r, Box(c - r, c + r), "ball")


def ball_hint(profile: CuspProfile, xs, i: int, n: int = 2) -> Ball:
    """Ball on the axis at x_{i+1} of radius half the smallest of phi(x_{i+1}) and the gaps."""
    xc = xs[i + 1] if i + 1 < len(xs) else 0.5 * xs[i]
    lo_x = xs[i + 2] if i + 2 < len(xs) else 0.0
    r = 0.5 * min(float(profile(np.array([xc]))[0]), xc - lo_x, xs[i] - xc)
    return Ball(tuple([float(xc)] + [0.0] * (n - 1)), float(r))


def node_ball(profile: CuspProfile, xs, i: int, grid: Grid, cells_mask: np.ndarray,
              shrink: float = 0.7, tries: int = 12) -> Ball:
    """A ball centered on the axis at x_{i+1} that the node's cell set is star-shaped to."""
    n = grid.ndim
    xc = xs[i + 1] if i + 1 < len(xs) else 0.5 * xs[i]
    lo_x = xs[i + 2] if i + 2 < len(xs) else 0.0
    r = 0.5 * min(float(profile(np.array([xc]))[0]), xc - lo_x, xs[i] - xc)
    c = np.array([xc] + [0.0] * (n - 1))
    for _ in range(tries):
        ballmask = Ball(tuple(c), r).region().mask(grid)
        if ballmask.any() and not np.any(ballmask & ~cells_mask):
            if star_test_cells(cells_mask, grid, c, r, n_ball=16, n_s=24):
                return Ball(tuple(float(v) for v in c), float(r))
        r *= shrink
    raise ContainmentError(f"no admissible ball found for cusp node {i}")


def cusp_cover(profile: CuspProfile, depth: int, grid: Grid, find_balls: bool = False) -> DomainTree:
    """Path tree 0 - 1 - ... - depth over Omega_i = {x_{i+2} < x < x_i}, B_i = {x_{i+1} < x < x_i}.

    The last node absorbs the tail: Omega_depth = {0 < x < x_depth}. Each node carries
    a ball hint on the axis at x_{i+1}; ``find_balls`` checks it on ``grid`` instead.
    """
    n = grid.ndim
    xs = cusp_sequence(profile, depth + 1)
    omega, b, parent = [], [], []
    for i in range(depth + 1):
        lo = xs[i + 2] if i < depth else 0.0
        omega.append(_slab(profile, lo, xs[i], n, f"Omega{i}"))
        b.append(None if i == 0 else _slab(profile, xs[i + 1], xs[i], n, f"B{i}"))
        parent.append(None if i == 0 else i - 1)
    dom = cusp_domain(profile, n)
    meta = {"family": "cusp", "sequence": xs, "truncation_depth": depth, "profile": profile.name,
            "K1": profile.K1, "K2": profile.K2, "profile_verified": profile.verified}
    tree = DomainTree(parent, omega, b, grid, N=2, domain=dom, meta=meta)
    empty = [t for t in range(1, len(tree)) if len(tree.b_cells[t]) == 0]
    if empty:
        raise DegenerateConnectorError(f"connector sets {empty} contain no cell; refine the grid")
    balls = []
    for i in range(depth + 1):
        if find_balls:
            cm = np.zeros(grid.size, bool)
            cm[tree.omega_cells[i]] = True
            balls.append(node_ball(profile, xs, i, grid, cm.reshape(grid.shape)))
        else:
            balls.append(ball_hint(profile, xs, i, n))
    tree.local = tuple(balls)
    return tree


def varpi_weight(profile: CuspProfile, grid: Grid, kappa: float, mask=None):
    """(varpi^(1-kappa), varpi^(-kappa)) with varpi(x, y) = phi(x)/x on the cusp cells."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if mask is None:
        mask = cusp_domain(profile, grid.ndim).mask(grid)
    X = grid.mesh()[0]
    with np.errstate(all="ignore"):
        v = np.where(mask & (X > 0), profile(np.where(X > 0, X, 1.0)) / np.where(X > 0, X, 1.0), 1.0)
    return (GridFunction(grid, v ** (1 - kappa), mask), GridFunction(grid, v ** (-kappa), mask))


def min_star_m(profile: CuspProfile) -> int:
    """Smallest integer m > 16 K1^2 K2^2."""
    return int(np.floor(16 * profile.K1 ** 2 * profile.K2 ** 2)) + 1


def star_split(profile: CuspProfile, i: int, m: int | None = None, sequence=None, n: int = 2,
               check: bool = True, samples: int = 32):
    """Overlapping slabs U_j = Omega_i cap {r_{j-1} < x < r_{j+1}} with balls at (r_j, 0).

    Returns a list of (Region, Ball) for j = 1..m-1.
    """
    if m is None:
        m = min_star_m(profile)
    if m <= 16 * profile.K1 ** 2 * profile.K2 ** 2:
        raise ProfileViolationError(f"m={m} must exceed 16 K1^2 K2^2")
    xs = sequence if sequence is not None else cusp_sequence(profile, i + 2)
    r = np.linspace(xs[i + 2], xs[i], m + 1)
    out = []
    for j in range(1, m):
        U = _slab(profile, r[j - 1], r[j + 1], n, f"U{j}")
        ball = Ball(tuple([float(r[j])] + [0.0] * (n - 1)), float((r[j + 1] - r[j - 1]) / 2))
        if check and not star_sample_test(profile, r[j - 1], r[j + 1], ball, samples):
            raise ProfileViolationError(f"slab {j} of node {i} fails the star-shape test")
        out.append((U, ball))
    return out


def star_sample_test(profile, x0, x1, ball: Ball, samples: int = 32) -> bool:
    """Points s*P + (1-s)*Q stay in the slab for P in the ball, Q in the slab, s in (0, 1)."""
    c = np.asarray(ball.center, float)
    n = len(c)
    dirs, _ = _sphere_rule(n, samples)
    P = np.concatenate([c[None], c + 0.999999 * ball.radius * dirs])
    xq = x0 + (x1 - x0) * (np.arange(samples) + 0.5) / samples
    tq = np.linspace(-1, 1, samples + 2)[1:-1] * (1 - 1e-9)
    tq = np.concatenate([tq, [-(1 - 1e-9), 1 - 1e-9]])
    if n == 2:
        X, T = np.meshgrid(xq, tq, indexing="ij")
        Q = np.stack([X.ravel(), (T * profile(X)).ravel()], -1)
    else:
        d2, _ = _sphere_rule(n - 1, samples) if n > 2 else (None, None)
        rad = np.abs(tq)
        Q = np.array([[x] + list(rr * profile(np.array([x]))[0] * d) for x in xq for rr in rad for d in d2])
    s = (np.arange(samples) + 0.5) / samples
    for p in P:
        x = s[None, :] * p[0] + (1 - s)[None, :] * Q[:, :1]
        if n == 2:
            rr = np.abs(s[None, :] * p[1] + (1 - s)[None, :] * Q[:, 1:2])
        else:
            y = s[None, :, None] * p[None, None, 1:] + (1 - s)[None, :, None] * Q[:, None, 1:]
            rr = np.sqrt((y ** 2).sum(-1))
        if not np.all((x > x0) & (x < x1) & (rr < profile(x))):
            return False
    return True


def galdi_constant_bound(U: Region, ball, grid: Grid | None = None) -> float:
    """(R / rho)^(n+1) with R the bounding-box diagonal of U."""
    if isinstance(ball, StarRegion):
        ball = Ball(ball.center, ball.radius)
    c = np.asarray(ball.center, float)
    n = len(c)
    dirs, _ = _sphere_rule(n, 64)
    pts = np.concatenate([c[None]] + [c + f * ball.radius * dirs for f in (0.25, 0.5, 0.75, 0.999)])
    if not U.contains(pts).all():
        raise ContainmentError("ball is not contained in U")
    if grid is not None:
        bm = ball.region().mask(grid)
        if np.any(bm & ~U.mask(grid)):
            raise ContainmentError("ball is not contained in U on the grid")
    R = U.bounding_box.diam
    return float((R / ball.radius) ** (n + 1))


def verify_star_split(profile: CuspProfile, depth: int, m: int | None = None, samples: int = 32,
                      n: int = 2, star: bool = True) -> CheckReport:
    """Star test on every slab of every node i <= depth; max (R/rho)^(n+1) over all of them.

    details["ratio"] is max R/rho; star=False skips the sampled segment test.
    """
    m = m if m is not None else min_star_m(profile)
    xs = cusp_sequence(profile, depth + 2)
    worst = 0.0
    ratio = 0.0
    ok = True
    spacing_ok = True
    for i in range(depth + 1):
        r = np.linspace(xs[i + 2], xs[i], m + 1)
        dr = r[1] - r[0]
        ph = float(profile(np.array([xs[i + 1]]))[0])
        if not (ph / m <= dr * (1 + 1e-12) and dr <= ph / (8 * profile.K1 ** 2 * profile.K2) * (1 + 1e-12)):
            spacing_ok = False
        for U, ball in star_split(profile, i, m, xs, n, check=False):
            x0, x1 = U.bounding_box.lo[0], U.bounding_box.hi[0]
            if star and not star_sample_test(profile, x0, x1, ball, samples):
                ok = False
            g = galdi_constant_bound(U, ball)
            worst = max(worst, g)
            ratio = max(ratio, g ** (1.0 / (n + 1)))
    return CheckReport("star_split", bool(ok and spacing_ok), worst, None,
                       {"m": m, "depth": depth, "star_ok": ok, "star_tested": star,
                        "spacing_ok": spacing_ok, "ratio": ratio})


def comparability_check(profile: CuspProfile, depth: int, samples: int = 256) -> CheckReport:
    """On [x_{i+1}, x_i]: x <= (K1+1) x_{i+1} and phi(x_{i+1})/K2 <= phi(x) <= (K1+1) phi(x_{i+1})."""
    xs = cusp_sequence(profile, depth)
    worst = 0.0
    ok = True
    for i in range(depth):
        x = np.linspace(xs[i + 1], xs[i], samples)
        p = profile(x)
        p1 = float(profile(np.array([xs[i + 1]]))[0])
        k1 = profile.K1 + 1
        ok &= bool(np.all(x <= k1 * xs[i + 1] * (1 + 1e-12)))
        ok &= bool(np.all(p >= p1 / profile.K2 * (1 - 1e-12)) and np.all(p <= k1 * p1 * (1 + 1e-12)))
        worst = max(worst, float(p.max() / p1))
    return CheckReport("cusp_comparability", ok, worst, profile.K1 + 1)
