"""Command-line front end: decompose | solve | verify | report.

Every subcommand reads a domain spec (JSON, validated against
schemas/domain.schema.json), builds the tree for its family and writes CSV
plot data plus a deterministic report.json into --out.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DivTreeError, ProfileViolationError, SpecError
from .grid_core import Box, Grid, GridFunction, Region, save_binary, save_csv
from .tree_decomp import (C1_constant, CheckReport, DomainTree, T_bound, decompose, random_test_functions,
                          tree_weight, validate_tree, verify_decomposition_bound, verify_T_bound)

__all__ = ["RunConfig", "load_spec", "build_family", "cmd_decompose", "cmd_solve", "cmd_verify",
           "cmd_report", "main", "EXIT_OK", "EXIT_BOUND", "EXIT_SPEC", "EXIT_DEGENERATE"]

EXIT_OK = 0
EXIT_BOUND = 2
EXIT_SPEC = 3
EXIT_DEGENERATE = 4


@dataclass
class RunConfig:
    family: str
    spec: dict
    h: float
    p: float = 2.0
    kappa: float = 1.0
    depth: int | None = None
    seed: int = 0
    out: Path = Path("out")
    f_kind: str = "random"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.p > 1:
            raise SpecError(f"field 'p': p = {self.p} violates the constraint p > 1")
        if self.kappa < 0:
            raise SpecError(f"field 'kappa': kappa = {self.kappa} violates the constraint kappa >= 0")
        if not self.h > 0:
            raise SpecError(f"field 'h': h = {self.h} must be positive")
        k = np.log2(1.0 / self.h)
        if abs(k - round(k)) > 1e-9:
            raise SpecError(f"field 'h': h = {self.h} is not a power of two")

    def to_dict(self) -> dict:
        return {"family": self.family, "h": self.h, "p": self.p, "kappa": self.kappa, "depth": self.depth,
                "seed": self.seed, "f": self.spec.get("f", {"kind": self.f_kind}),
                "name": self.spec.get("name", self.family)}


def _schema() -> dict:
    txt = resources.files("divtree").joinpath("schemas/domain.schema.json").read_text()
    return json.loads(txt)


def load_spec(path) -> dict:
    """Parse and schema-check a domain spec file; errors name the line or field."""
    import jsonschema

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise SpecError(f"cannot read domain spec {path}: {e}") from e
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    validator = jsonschema.Draft202012Validator(_schema())
    errs = sorted(validator.iter_errors(spec), key=lambda e: list(e.absolute_path))
    if errs:
        e = errs[0]
        where = "/".join(str(x) for x in e.absolute_path) or "<root>"
        raise SpecError(f"{path}: field '{where}': {e.message}")
    return spec


def make_config(spec: dict, args=None) -> RunConfig:
    """Spec values, overridden by any command-line flag that was given."""
    def pick(name, default):
        v = getattr(args, name, None) if args is not None else None
        return v if v is not None else spec.get(name, default)

    out = Path(getattr(args, "out", None) or "out")
    return RunConfig(family=spec["family"], spec=spec, h=float(pick("h", 1 / 64)), p=float(pick("p", 2.0)),
                     kappa=float(pick("kappa", 1.0)), depth=pick("depth", None), seed=int(pick("seed", 0)),
                     out=out, f_kind=spec.get("f", {}).get("kind", "random"))


def _region(d) -> Region:
    if "union" in d:
        return Region.union([Box(b["lo"], b["hi"]) for b in d["union"]])
    return Region.box(d["lo"], d["hi"])


@dataclass
class _Ball:
    center: tuple
    radius: float


def build_family(cfg: RunConfig):
    """(tree, weights, m1_theory, info) for the configured family.

    weights is (omega_bar, hat_w) or None; info carries family-specific objects.
    """
    spec = cfg.spec
    fam = cfg.family
    h = cfg.h
    info = {}
    if fam == "whitney":
        from .whitney import shadow_weight, whitney_tree

        dom = _region(spec["region"])
        bb = dom.bounding_box
        grid = Grid.covering(bb.lo, bb.hi, h)
        tree = whitney_tree(dom, grid, int(cfg.depth or 4))
        wbar = shadow_weight(tree)
        weights = (wbar, GridFunction(grid, np.ones(grid.shape), tree.mask))
        return tree, weights, tree.meta["M1_theory"], info
    if fam == "cusp":
        from .cusp import cusp_cover, varpi_weight

        pr = _cusp_profile(spec["profile"])
        info["profile"] = pr
        a = pr.a
        top = float(pr(np.array([a]))[0])
        grid = Grid.covering([0.0, -top], [a, top], h)
        tree = cusp_cover(pr, int(cfg.depth or 6), grid)
        w1, w2 = varpi_weight(pr, grid, cfg.kappa, tree.mask)
        m = tree.mask
        wbar = GridFunction(grid, np.where(m, w1.values / np.where(m, w2.values, 1.0), 1.0), m)
        return tree, (wbar, w2), None, info
    if fam == "holder":
        from .holder_graph import holder_grid, holder_tree, holder_weights, pile_cubes

        pr = _holder_profile(spec["profile"])
        rep = pr.validate()
        if not rep.passed:
            raise ProfileViolationError("; ".join(rep.details["failures"]))
        piled = pile_cubes(pr, int(cfg.depth or 12), min_side=2 * h)
        grid = holder_grid(pr, h)
        tree = holder_tree(piled, grid)
        wbar, what, wrep = holder_weights(piled, pr, grid, cfg.kappa, cfg.p, tree)
        info.update({"profile": pr, "piled": piled, "weights_report": wrep})
        return tree, (wbar, what), None, info
    if fam == "custom-tree":
        nodes = sorted(spec["nodes"], key=lambda d: d["id"])
        ids = [d["id"] for d in nodes]
        if ids != list(range(len(nodes))):
            raise SpecError(f"field 'nodes': ids must be 0..{len(nodes) - 1}, got {ids}")
        omega = [_region(d["omega"]) for d in nodes]
        b = [None if d.get("b") is None else _region(d["b"]) for d in nodes]
        parent = [d.get("parent") for d in nodes]
        balls = [_Ball(tuple(d["ball"]["center"]), float(d["ball"]["radius"])) if "ball" in d else None
                 for d in nodes]
        if "bounds" in spec:
            lo, hi = spec["bounds"]["lo"], spec["bounds"]["hi"]
        else:
            lo = np.min([r.bounding_box.lo for r in omega], axis=0)
            hi = np.max([r.bounding_box.hi for r in omega], axis=0)
        grid = Grid.covering(lo, hi, h)
        N = spec.get("N")
        if N is None:
            cnt = np.zeros(grid.size, np.int32)
            for r in omega:
                cnt[r.cell_indices(grid)] += 1
            N = max(int(cnt.max()), 1)
        tree = DomainTree(parent, omega, b, grid, N=N, local=balls, meta={"family": "custom-tree"})
        return tree, None, None, info
    raise SpecError(f"field 'family': unknown family {fam!r}")


def _cusp_profile(d):
    from dataclasses import replace

    from .cusp import exp_cusp_profile, oscillating_profile, power_profile

    kind = d["kind"]
    a = float(d.get("a", 1.0))
    if kind == "power":
        pr = power_profile(float(d.get("gamma", 2.0)), a)
    elif kind == "exp":
        pr = exp_cusp_profile(a)
    elif kind == "oscillating":
        pr = oscillating_profile(float(d.get("gamma", 2.0)), a)
    else:
        raise SpecError(f"field 'profile/kind': {kind!r} is not a cusp profile")
    declared = {k: float(d[k]) for k in ("K1", "K2") if k in d}
    if declared:
        pr = replace(pr, **declared)
    rep = pr.validate()
    if not rep.passed:
        raise ProfileViolationError("declared profile constants fail: " + "; ".join(rep.details["failures"]))
    return pr


def _holder_profile(d):
    from .holder_graph import flat_graph, power_hump

    kind = d["kind"]
    l = float(d.get("l", 0.25))
    if kind == "power-hump":
        return power_hump(l, float(d.get("alpha", 0.5)), d.get("c"))
    if kind == "flat":
        return flat_graph(l, float(d.get("height", 2.5)))
    raise SpecError(f"field 'profile/kind': {kind!r} is not a Hoelder profile")


def make_f(cfg: RunConfig, tree: DomainTree) -> GridFunction:
    from .solver import random_f

    fs = cfg.spec.get("f", {})
    kind = fs.get("kind", "random")
    f = random_f(tree.grid, tree.mask, cfg.seed, kind, int(fs.get("modes", 3)), float(fs.get("value", 1.0)))
    return f


# output helpers

def _dump_json(obj, path: Path):
    from .solver import _plain

    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=1) + "\n")


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_cubes(tree: DomainTree, info: dict, path: Path) -> int:
    """Cube dump: level, index, corner coordinates, side, parent id. Returns the row count."""
    rows = []
    if tree.meta.get("family") == "whitney":
        cubes = tree.meta["cubes"]
        for t, q in enumerate(cubes):
            rows.append([q.level, t] + [float(v) for v in q.lo] + [q.side, -1 if tree.parent[t] is None
                                                                  else tree.parent[t]])
    elif "piled" in info:
        piled = info["piled"]
        for t, q in enumerate(piled):
            rows.append([q.level, t] + [float(v) for v in piled.cube_box(t).lo] + [piled.side(t),
                                                                                -1 if q.parent is None else q.parent])
    else:
        for t, r in enumerate(tree.omega):
            bb = r.bounding_box
            rows.append([tree.depth[t], t] + [float(v) for v in bb.lo] + [float(bb.sides.max()),
                                                                         -1 if tree.parent[t] is None
                                                                         else tree.parent[t]])
    n = tree.grid.ndim
    _write_rows(path, ["level", "index"] + [f"x{i}" for i in range(n)] + ["side", "parent"], rows)
    return len(rows)


def _base_report(cfg: RunConfig, tree: DomainTree) -> dict:
    return {"config": cfg.to_dict(), "grid": tree.grid.to_dict(), "tree_stats": tree.stats()}


def cmd_decompose(cfg: RunConfig) -> int:
    tree, weights, m1, info = build_family(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    f = make_f(cfg, tree)
    res = decompose(f, tree)
    om = tree_weight(tree).values.ravel()
    wn = res.weighted_norms(cfg.p, om)
    dv = tree.grid.cell_measure
    rows = []
    for t in range(len(tree)):
        q = tree.parent[t]
        rows.append([t, -1 if q is None else q, float(res.values[t].sum() * dv),
                     int(np.count_nonzero(res.values[t])), len(tree.omega_cells[t]), float(wn[t])])
    _write_rows(cfg.out / "parts.csv",
                ["node", "parent", "integral", "support_cells", "omega_cells", "weighted_norm"], rows)
    write_cubes(tree, info, cfg.out / "cubes.csv")
    save_csv(tree_weight(tree), cfg.out / "omega.csv")
    cover = validate_tree(tree)
    bound = verify_decomposition_bound(f, tree, cfg.p)
    rep = _base_report(cfg, tree)
    l1 = float(np.abs(f.values.ravel()[tree.mask_flat]).sum() * dv)
    n_cover = tree.stats()["N_cover"]
    rep["constants"] = {"N": tree.N, "N_cover": n_cover, "C1": C1_constant(cfg.p, n_cover),
                        "MT_bound": T_bound(cfg.p, n_cover)}
    rep["checks"] = {"cover": cover.to_dict(), "decomposition_bound": bound.to_dict()}
    rep["per_node"] = [{"node": r[0], "parent": r[1], "integral": r[2], "support_cells": r[3],
                        "weighted_norm": r[5]} for r in rows]
    rep["f_l1"] = l1
    _dump_json(rep, cfg.out / "report.json")
    ok = cover.passed and bound.passed
    print(f"decompose: {len(tree)} nodes, cover {'ok' if cover.passed else 'FAIL'}, "
          f"C1 ratio {bound.empirical:.4g} -> {cfg.out}")
    return EXIT_OK if ok else EXIT_BOUND


def cmd_solve(cfg: RunConfig) -> int:
    from .solver import solve_divergence

    tree, weights, m1, info = build_family(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    f = make_f(cfg, tree)
    sopts = dict(cfg.spec.get("solve", {}))
    u, rep = solve_divergence(f, tree, weights, cfg.p, m1_theory=m1, seed=cfg.seed, **sopts)
    save_csv(u, cfg.out / "u.csv")
    save_binary(u, cfg.out / "u.bin")
    save_csv(rep.residual_field, cfg.out / "residual.csv")
    save_csv(f, cfg.out / "f.csv")
    if weights is not None:
        save_csv(weights[0], cfg.out / "omega_bar.csv")
    write_cubes(tree, info, cfg.out / "cubes.csv")
    d = rep.to_dict()
    d["config"] = dict(cfg.to_dict(), solver=d["config"])
    _dump_json(d, cfg.out / "report.json")
    print(f"solve: residual {rep.residual:.3e}, C_emp {rep.C_emp if rep.C_emp is None else f'{rep.C_emp:.4g}'}"
          f" <= C_theory {rep.C_theory:.4g}: {'pass' if rep.passed else 'FAIL'} -> {cfg.out}")
    return EXIT_OK if rep.passed else EXIT_BOUND


VERIFY_ROWS = ("cover", "disjointness", "zero_means", "T_bound", "C1_bound", "whitney_geometry", "star_shape",
               "dG_bracket")


def _zero_means(tree: DomainTree, trials: int, seed: int) -> CheckReport:
    dv = tree.grid.cell_measure
    m = tree.mask_flat
    worst_int, worst_sum = 0.0, 0.0
    for v in random_test_functions(tree, trials, seed):
        f = GridFunction(tree.grid, v.reshape(tree.grid.shape), tree.mask)
        res = decompose(f, tree)
        l1 = float(np.abs(v[m]).sum() * dv)
        for t in range(len(tree)):
            if t != tree.root:
                worst_int = max(worst_int, abs(res.integrals[t]) / l1)
        s = res.sum_parts()
        worst_sum = max(worst_sum, float(np.max(np.abs(s - np.where(m, v, 0.0))) / np.max(np.abs(v[m]))))
    ok = worst_int <= 1e-10 and worst_sum <= 1e-12
    return CheckReport("zero_means", ok, worst_int, 1e-10, {"sum_error": worst_sum, "trials": trials})


def verify_matrix(cfg: RunConfig, tree=None, info=None) -> dict:
    """Check name -> CheckReport, or None where the row does not apply to the family."""
    if tree is None:
        tree, _, _, info = build_family(cfg)
    trials = int(cfg.spec.get("verify", {}).get("trials", 20))
    rows = dict.fromkeys(VERIFY_ROWS)
    cover = validate_tree(tree)
    rows["cover"] = CheckReport("cover", cover.uncovered_cells == 0 and cover.max_cover <= tree.N
                                and cover.b_nonempty and cover.b_contained, cover.max_cover, tree.N,
                                {"failures": cover.failures})
    rows["disjointness"] = CheckReport("disjointness", cover.b_disjoint)
    rows["zero_means"] = _zero_means(tree, trials, cfg.seed)
    rows["T_bound"] = verify_T_bound(tree, cfg.p, trials, cfg.seed)
    worst = 0.0
    ok = True
    for i, v in enumerate(random_test_functions(tree, trials, cfg.seed + 1)):
        f = GridFunction(tree.grid, v.reshape(tree.grid.shape), tree.mask)
        r = verify_decomposition_bound(f, tree, cfg.p)
        worst = max(worst, r.empirical)
        ok &= r.passed
    rows["C1_bound"] = CheckReport("C1_bound", ok, worst, 1.0, {"trials": trials})
    fam = cfg.family
    if fam == "whitney":
        from .whitney import verify_cube_geometry, verify_distances

        cubes = tree.meta["cubes"]
        geo = verify_cube_geometry(cubes)
        fam_cubes = tree.meta.get("family_cubes")
        dist = verify_distances(fam_cubes, fam_cubes.sample_spacing) if fam_cubes is not None else None
        sub = {k: v.passed for k, v in geo.items()}
        if dist is not None:
            sub["distance"] = dist.passed
        rows["whitney_geometry"] = CheckReport("whitney_geometry", all(sub.values()), None, None, sub)
    if fam == "cusp":
        from .cusp import verify_star_split

        pr = info["profile"]
        m = cfg.spec["profile"].get("m")
        rows["star_shape"] = verify_star_split(pr, int(cfg.depth or 6), m)
    if fam == "holder":
        from .holder_graph import GraphCloud, verify_distance_bracket

        piled = info["piled"]
        cloud = GraphCloud(info["profile"], cfg.h / 2)
        rows["dG_bracket"] = verify_distance_bracket(piled, cloud)
    return rows


def cmd_verify(cfg: RunConfig) -> int:
    tree, _, _, info = build_family(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = verify_matrix(cfg, tree, info)
    out_rows = []
    for k in VERIFY_ROWS:
        r = rows[k]
        if r is None:
            out_rows.append([k, "n/a", "", ""])
        else:
            out_rows.append([k, "pass" if r.passed else "fail", "" if r.empirical is None else r.empirical,
                             "" if r.bound is None else r.bound])
    _write_rows(cfg.out / "verify.csv", ["check", "status", "value", "bound"], out_rows)
    rep = _base_report(cfg, tree)
    rep["checks"] = {k: (None if v is None else v.to_dict()) for k, v in rows.items()}
    _dump_json(rep, cfg.out / "report.json")
    for r in out_rows:
        print(f"{r[0]:18s} {r[1]}")
    ok = all(v.passed for v in rows.values() if v is not None)
    return EXIT_OK if ok else EXIT_BOUND


def cmd_report(out: Path) -> int:
    """Summarise a run directory; cube outlines go to outlines.csv as closed polygons."""
    rp = out / "report.json"
    if not rp.exists():
        raise SpecError(f"{rp} not found; run decompose, solve or verify first")
    rep = json.loads(rp.read_text())
    lines = [f"family: {rep['config'].get('family')}  h = {rep['grid'].get('h')}"]
    ts = rep.get("tree_stats", {})
    lines.append("tree: " + ", ".join(f"{k}={ts[k]}" for k in sorted(ts)))
    c = rep.get("constants", {})
    for k in ("N", "M1", "M2", "MT", "C_theory", "C_emp", "C1"):
        if k in c:
            lines.append(f"{k}: {c[k]}")
    if "residual" in rep:
        lines.append(f"residual: {rep['residual']}")
    for k, v in sorted((rep.get("checks") or {}).items()):
        lines.append(f"check {k}: {'n/a' if v is None else ('pass' if v.get('passed') else 'fail')}")
    cp = out / "cubes.csv"
    if cp.exists():
        data = np.loadtxt(cp, delimiter=",", skiprows=1, ndmin=2)
        if data.size and data.shape[1] == 6:
            poly = []
            for row in data:
                x0, y0, s = row[2], row[3], row[4]
                for k, (dx, dy) in enumerate(((0, 0), (1, 0), (1, 1), (0, 1), (0, 0))):
                    poly.append([int(row[1]), k, x0 + dx * s, y0 + dy * s])
            _write_rows(out / "outlines.csv", ["cube", "vertex", "x", "y"], poly)
            lines.append(f"outlines: {len(data)} cubes -> {out / 'outlines.csv'}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_SPEC)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="divtree", description="Tree decompositions and weighted divergence solves.")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    for name, hlp in (("decompose", "write per-node g_t summaries"), ("solve", "solve div u = f"),
                      ("verify", "run the invariant suite"), ("report", "summarise a run directory")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--out", type=Path, default=None, help="output directory (default: out)")
        if name == "report":
            continue
        sp.add_argument("--domain", required=True, help="domain spec JSON file")
        sp.add_argument("--h", type=float, default=None, help="grid step (power of two)")
        sp.add_argument("--p", type=float, default=None)
        sp.add_argument("--kappa", type=float, default=None)
        sp.add_argument("--depth", type=int, default=None, help="tree depth or max level")
        sp.add_argument("--seed", type=int, default=None)
    return ap


def _set_threads():
    v = os.environ.get("DIVTREE_THREADS")
    if not v:
        return
    try:
        import numba

        numba.set_num_threads(max(1, min(int(v), numba.config.NUMBA_NUM_THREADS)))
    except ValueError as e:
        raise SpecError(f"DIVTREE_THREADS={v!r} is not a positive integer") from e


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        _set_threads()
        if args.cmd == "report":
            return cmd_report(args.out or Path("out"))
        cfg = make_config(load_spec(args.domain), args)
        return {"decompose": cmd_decompose, "solve": cmd_solve, "verify": cmd_verify}[args.cmd](cfg)
    except DivTreeError as e:
        print(f"divtree: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # numeric degeneracy surfaced as a plain ValueError (grid too coarse, etc.)
        print(f"divtree: {e}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
