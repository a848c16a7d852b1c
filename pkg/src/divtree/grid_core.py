"""Uniform Cartesian grids, regions, grid functions and the basic discrete calculus.

A cell belongs to a region iff its center does. All integrals are midpoint sums.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidWeightError

__all__ = [
    "Grid", "Box", "Region", "GridFunction",
    "measure", "integral", "weighted_lp_norm", "lp_norm",
    "partial_fd", "divergence_fd", "gradient_fd",
    "save_csv", "load_csv", "save_binary",
]


def _tup(x, typ=float):
    return tuple(typ(v) for v in np.atleast_1d(np.asarray(x)).ravel())


@dataclass(frozen=True)
class Grid:
    """Uniform grid of ``shape`` cells of side ``h`` starting at ``origin``."""

    origin: tuple
    h: float
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", _tup(self.origin))
        object.__setattr__(self, "shape", _tup(self.shape, int))
        object.__setattr__(self, "h", float(self.h))
        if not self.h > 0:
            raise ValueError("cell size must be positive")
        if len(self.origin) != len(self.shape):
            raise ValueError("origin and shape dimensions differ")
        if any(s < 1 for s in self.shape):
            raise ValueError("every shape entry must be >= 1")

    @classmethod
    def covering(cls, lo, hi, h) -> "Grid":
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        shape = np.maximum(1, np.ceil((hi - lo) / h - 1e-9)).astype(int)
        return cls(tuple(lo), h, tuple(shape))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_measure(self) -> float:
        return self.h ** self.ndim

    @property
    def upper(self) -> tuple:
        return tuple(o + self.h * s for o, s in zip(self.origin, self.shape))

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + (np.arange(self.shape[i]) + 0.5) * self.h

    def mesh(self) -> tuple:
        return tuple(np.meshgrid(*[self.axis(i) for i in range(self.ndim)], indexing="ij"))

    def centers(self, flat_index=None) -> np.ndarray:
        """Cell centers as an (m, n) array, for all cells or the given flat indices."""
        if flat_index is None:
            flat_index = np.arange(self.size)
        idx = np.unravel_index(np.asarray(flat_index), self.shape)
        return np.stack([self.origin[i] + (idx[i] + 0.5) * self.h for i in range(self.ndim)], axis=-1)

    def refine(self, r: int) -> "Grid":
        return Grid(self.origin, self.h / r, tuple(s * r for s in self.shape))

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "h": self.h, "shape": list(self.shape)}


@dataclass(frozen=True)
class Box:
    """Open axis-aligned box (lo, hi)."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", _tup(self.lo))
        object.__setattr__(self, "hi", _tup(self.hi))
        if len(self.lo) != len(self.hi):
            raise ValueError("box corners differ in dimension")
        if any(b < a for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"inverted box {self.lo} {self.hi}")

    @property
    def ndim(self):
        return len(self.lo)

    @property
    def sides(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def diam(self) -> float:
        return float(np.linalg.norm(self.sides))

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        return np.all((pts > np.asarray(self.lo)) & (pts < np.asarray(self.hi)), axis=-1)

    def contains_box(self, other: "Box") -> bool:
        return all(a <= c and d <= b for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def intersects(self, other: "Box") -> bool:
        """True iff the open boxes share a point."""
        return all(max(a, c) < min(b, d) for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def expand(self, pad) -> "Box":
        pad = np.broadcast_to(np.asarray(pad, float), (self.ndim,))
        return Box(np.asarray(self.lo) - pad, np.asarray(self.hi) + pad)

    def axis_ranges(self, grid: Grid) -> list:
        """Per-axis contiguous index ranges of cells whose center is inside."""
        out = []
        for i in range(grid.ndim):
            ax = grid.axis(i)
            sel = np.nonzero((ax > self.lo[i]) & (ax < self.hi[i]))[0]
            out.append(sel)
        return out


class Region:
    """Measurable set described by a box, a union of boxes or a predicate.

    ``predicate`` maps an (m, n) array of points to a boolean array.
    """

    def __init__(self, kind: str, bounding_box: Box, boxes: Sequence[Box] = (),
                 predicate: Callable | None = None, name: str = ""):
        if kind not in ("box", "box_union", "predicate"):
            raise ValueError(f"unknown region kind {kind!r}")
        if kind == "predicate" and predicate is None:
            raise ValueError("predicate region needs a membership function")
        if kind != "predicate" and not boxes:
            raise ValueError("box region needs at least one box")
        for b in boxes:
            if not bounding_box.contains_box(b):
                raise ValueError("box outside bounding box")
        self.kind = kind
        self.boxes = tuple(boxes)
        self.predicate = predicate
        self.bounding_box = bounding_box
        self.name = name

    @classmethod
    def box(cls, lo, hi, name="") -> "Region":
        b = Box(lo, hi)
        return cls("box", b, (b,), name=name)

    @classmethod
    def union(cls, boxes: Sequence[Box], name="") -> "Region":
        boxes = [b if isinstance(b, Box) else Box(*b) for b in boxes]
        lo = np.min([b.lo for b in boxes], axis=0)
        hi = np.max([b.hi for b in boxes], axis=0)
        return cls("box_union", Box(lo, hi), boxes, name=name)

    @classmethod
    def from_predicate(cls, fn: Callable, bounding_box: Box, name="") -> "Region":
        return cls("predicate", bounding_box, (), predicate=fn, name=name)

    @property
    def ndim(self) -> int:
        return self.bounding_box.ndim

    def __repr__(self):
        return f"Region({self.kind}, bbox={self.bounding_box.lo}..{self.bounding_box.hi})"

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        if self.kind == "predicate":
            inside = self.bounding_box.contains(pts)
            out = np.zeros(len(pts), bool)
            if inside.any():
                out[inside] = np.asarray(self.predicate(pts[inside]), bool)
            return out
        out = np.zeros(len(pts), bool)
        for b in self.boxes:
            out |= b.contains(pts)
        return out

    def cell_indices(self, grid: Grid) -> np.ndarray:
        """Sorted flat indices of the grid cells whose center lies in the region."""
        if self.kind == "box":
            ranges = self.boxes[0].axis_ranges(grid)
            if any(len(r) == 0 for r in ranges):
                return np.zeros(0, np.int64)
            idx = np.ravel_multi_index(np.meshgrid(*ranges, indexing="ij"), grid.shape)
            return np.sort(idx.ravel()).astype(np.int64)
        ranges = self.bounding_box.axis_ranges(grid)
        if any(len(r) == 0 for r in ranges):
            return np.zeros(0, np.int64)
        idx = np.ravel_multi_index(np.meshgrid(*ranges, indexing="ij"), grid.shape).ravel()
        keep = self.contains(grid.centers(idx))
        return np.sort(idx[keep]).astype(np.int64)

    def mask(self, grid: Grid) -> np.ndarray:
        m = np.zeros(grid.size, bool)
        m[self.cell_indices(grid)] = True
        return m.reshape(grid.shape)


def measure(region: Region, grid: Grid) -> float:
    return grid.cell_measure * len(region.cell_indices(grid))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Scalar (values.shape == grid.shape) or vector ((c,) + grid.shape) field.

    Values off the mask are stored as 0. Instances are read-only.
    """

    grid: Grid
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        g = self.grid
        vals = np.array(self.values, dtype=float, copy=True)
        mask = np.ones(g.shape, bool) if self.mask is None else np.array(self.mask, bool, copy=True)
        if mask.shape != g.shape:
            mask = mask.reshape(g.shape)
        if vals.shape == (g.size,):
            vals = vals.reshape(g.shape)
        if vals.shape != g.shape and vals.shape[1:] != g.shape:
            raise ValueError(f"values of shape {vals.shape} do not fit grid {g.shape}")
        vals = np.where(mask, vals, 0.0)
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite values on masked cells")
        vals.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", mask)

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == self.grid.ndim + 1

    @property
    def components(self) -> int:
        return self.values.shape[0] if self.is_vector else 1

    @classmethod
    def zeros(cls, grid: Grid, mask=None, components: int = 1) -> "GridFunction":
        shape = grid.shape if components == 1 else (components,) + grid.shape
        return cls(grid, np.zeros(shape), mask)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable, mask=None) -> "GridFunction":
        """Sample ``fn(*coords)`` at cell centers (coords in ij meshgrid layout)."""
        with np.errstate(all="ignore"):
            vals = np.asarray(fn(*grid.mesh()), float)
        if mask is not None:
            vals = np.where(np.asarray(mask), vals, 0.0)
        return cls(grid, np.broadcast_to(vals, vals.shape), mask)

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.grid, values, self.mask)

    def integral(self) -> float:
        if self.is_vector:
            raise ValueError("integral is defined for scalar functions")
        return float(self.grid.cell_measure * self.values[self.mask].sum())

    def masked_values(self) -> np.ndarray:
        """Values on masked cells, shape (m,) or (c, m)."""
        if self.is_vector:
            return self.values[:, self.mask]
        return self.values[self.mask]


def integral(f: GridFunction) -> float:
    return f.integral()


def _pointwise_abs_p(f: GridFunction, p: float) -> np.ndarray:
    a = np.abs(f.values)
    if f.is_vector:
        return (a ** p).sum(axis=0)
    return a ** p


def weighted_lp_norm(f: GridFunction, weight: GridFunction | None, p: float) -> float:
    """(h^n sum |f w|^p)^(1/p) over masked cells; vector |.|^p sums over components."""
    if not p >= 1:
        raise ValueError("p must be >= 1")
    mask = f.mask
    if weight is None:
        w = 1.0
    else:
        w = np.asarray(weight.values)
        if np.any(w[mask] <= 0) or not np.all(np.isfinite(w[mask])):
            raise InvalidWeightError("weight must be positive and finite on masked cells")
    if np.isinf(p):
        a = np.abs(f.values * w)
        if f.is_vector:
            a = a.max(axis=0)
        return float(a[mask].max()) if mask.any() else 0.0
    a = _pointwise_abs_p(f, p) * (np.abs(w) ** p if weight is not None else 1.0)
    return float((f.grid.cell_measure * a[mask].sum()) ** (1.0 / p))


def lp_norm(f: GridFunction, p: float) -> float:
    return weighted_lp_norm(f, None, p)


def partial_fd(values: np.ndarray, mask: np.ndarray, h: float, axis: int) -> np.ndarray:
    """d/dx_axis on masked cells: centered inside, one-sided first order at the mask edge.

    Cells with no masked neighbour along the axis get 0.
    """
    v = np.where(mask, values, 0.0)
    n = mask.ndim
    fwd = [slice(None)] * n
    bwd = [slice(None)] * n
    fwd[axis] = slice(1, None)
    bwd[axis] = slice(None, -1)
    fwd, bwd = tuple(fwd), tuple(bwd)
    vp = np.zeros_like(v)
    vm = np.zeros_like(v)
    mp = np.zeros_like(mask)
    mm = np.zeros_like(mask)
    vp[bwd] = v[fwd]
    mp[bwd] = mask[fwd]
    vm[fwd] = v[bwd]
    mm[fwd] = mask[bwd]
    out = np.zeros_like(v)
    both = mp & mm
    only_p = mp & ~mm
    only_m = mm & ~mp
    out[both] = (vp[both] - vm[both]) / (2 * h)
    out[only_p] = (vp[only_p] - v[only_p]) / h
    out[only_m] = (v[only_m] - vm[only_m]) / h
    return np.where(mask, out, 0.0)


def divergence_fd(u) -> GridFunction:
    """Discrete divergence; the flux balance for a StaggeredField."""
    if hasattr(u, "faces"):
        return u.divergence()
    g = u.grid
    if not u.is_vector or u.components != g.ndim:
        raise ValueError("divergence needs an n-component vector field")
    d = sum(partial_fd(u.values[i], u.mask, g.h, i) for i in range(g.ndim))
    return GridFunction(g, d, u.mask)


def gradient_fd(u: GridFunction) -> GridFunction:
    """Jacobian D u with components ordered (i, j) -> d u_i / d x_j, flattened."""
    g = u.grid
    comps = [u.values] if not u.is_vector else list(u.values)
    out = [partial_fd(c, u.mask, g.h, j) for c in comps for j in range(g.ndim)]
    return GridFunction(g, np.stack(out), u.mask)


@dataclass(frozen=True)
class StaggeredField:
    """Vector field stored as normal components on cell faces.

    ``faces[i]`` has the grid shape plus one along axis i; entry k along that axis is
    the face between cells k - 1 and k. The divergence is the exact flux balance.
    """

    grid: Grid
    faces: tuple
    mask: np.ndarray

    def __post_init__(self):
        g = self.grid
        faces = tuple(np.asarray(a, float) for a in self.faces)
        for i, a in enumerate(faces):
            want = tuple(s + (1 if k == i else 0) for k, s in enumerate(g.shape))
            if a.shape != want:
                raise ValueError(f"face array {i} has shape {a.shape}, expected {want}")
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "mask", np.asarray(self.mask, bool).reshape(g.shape))

    @classmethod
    def zeros(cls, grid: Grid, mask=None) -> "StaggeredField":
        n = grid.ndim
        faces = [np.zeros(tuple(s + (1 if k == i else 0) for k, s in enumerate(grid.shape)))
                 for i in range(n)]
        m = np.ones(grid.shape, bool) if mask is None else mask
        return cls(grid, faces, m)

    def divergence(self) -> GridFunction:
        h = self.grid.h
        d = sum(np.diff(a, axis=i) for i, a in enumerate(self.faces)) / h
        return GridFunction(self.grid, np.where(self.mask, d, 0.0), self.mask)

    def cell_average(self) -> GridFunction:
        comps = []
        for i, a in enumerate(self.faces):
            lo = [slice(None)] * a.ndim
            hi = [slice(None)] * a.ndim
            lo[i] = slice(None, -1)
            hi[i] = slice(1, None)
            comps.append(0.5 * (a[tuple(lo)] + a[tuple(hi)]))
        v = np.where(self.mask[None], np.stack(comps), 0.0)
        return GridFunction(self.grid, v, self.mask)

    def gradient(self) -> GridFunction:
        """Jacobian ordered (i, j) -> d u_i / d x_j; diagonal entries from face differences."""
        g = self.grid
        avg = self.cell_average().values
        out = []
        for i in range(g.ndim):
            for j in range(g.ndim):
                if i == j:
                    d = np.diff(self.faces[i], axis=i) / g.h
                    out.append(np.where(self.mask, d, 0.0))
                else:
                    out.append(partial_fd(avg[i], self.mask, g.h, j))
        return GridFunction(g, np.stack(out), self.mask)

    def restrict(self, r: int, coarse: Grid, mask=None) -> "StaggeredField":
        """Face averages on a grid coarser by the integer factor r (same origin)."""
        n = self.grid.ndim
        out = []
        for i, a in enumerate(self.faces):
            a = a[tuple(slice(None, None, r) if k == i else slice(None) for k in range(n))]
            shp = []
            for k, s in enumerate(a.shape):
                shp += [s] if k == i else [s // r, r]
            a = a.reshape(shp)
            # average over the r fine faces inside each coarse face
            slots = []
            pos = 0
            for k in range(n):
                if k == i:
                    pos += 1
                else:
                    slots.append(pos + 1)
                    pos += 2
            out.append(a.mean(axis=tuple(slots)))
        m = np.ones(coarse.shape, bool) if mask is None else mask
        return StaggeredField(coarse, out, m)

    def to_function(self) -> GridFunction:
        return self.cell_average()


def save_csv(f: GridFunction, path) -> None:
    """Write (cell index, value per component) rows for masked cells."""
    idx = np.flatnonzero(f.mask.ravel())
    vals = f.values.reshape(f.components, -1)[:, idx] if f.is_vector else f.values.ravel()[idx][None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell"] + [f"v{c}" for c in range(vals.shape[0])])
        for k, i in enumerate(idx):
            w.writerow([int(i)] + [repr(float(x)) for x in vals[:, k]])


def load_csv(path, grid: Grid) -> GridFunction:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    idx = rows[:, 0].astype(int)
    ncomp = rows.shape[1] - 1
    vals = np.zeros((ncomp, grid.size))
    vals[:, idx] = rows[:, 1:].T
    mask = np.zeros(grid.size, bool)
    mask[idx] = True
    shape = grid.shape if ncomp == 1 else (ncomp,) + grid.shape
    return GridFunction(grid, vals.reshape(shape), mask.reshape(grid.shape))


def save_binary(f: GridFunction, path) -> None:
    """Flat little-endian float64 dump of the full value array (C order)."""
    np.ascontiguousarray(f.values, dtype="<f8").tofile(path)
