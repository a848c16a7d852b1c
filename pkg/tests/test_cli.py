import csv
import json
from pathlib import Path

import numpy as np
import pytest

from divtree.cli import RunConfig, build_parser, load_spec, main
from divtree.errors import SpecError
from divtree.grid_core import Grid, Region
from divtree.solver import random_f
from divtree.tree_decomp import DomainTree, decompose

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def spec_file(tmp_path, spec, name="spec.json"):
    p = tmp_path / name
    p.write_text(json.dumps(spec) if not isinstance(spec, str) else spec)
    return str(p)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def chain_spec(**kw):
    s = json.loads((CONFIGS / "chain.json").read_text())
    s.update(kw)
    return s


def test_chain_decompose_matches_library(tmp_path):
    out = tmp_path / "out"
    assert main(["decompose", "--domain", str(CONFIGS / "chain.json"), "--out", str(out)]) == 0
    got = rows(out / "parts.csv")
    g = Grid((0.0,), 1 / 16, (64,))
    tree = DomainTree([None, 0, 1], [Region.box([0], [2]), Region.box([1], [3]), Region.box([2.5], [4])],
                      [None, Region.box([1], [2]), Region.box([2.5], [3])], g, N=2)
    res = decompose(random_f(g, tree.mask, 0), tree)
    assert [int(r["node"]) for r in got] == [0, 1, 2]
    assert [int(r["parent"]) for r in got] == [-1, 0, 1]
    for t, r in enumerate(got):
        assert float(r["integral"]) == pytest.approx(res.integrals[t], abs=1e-15)
        assert int(r["support_cells"]) == np.count_nonzero(res.values[t])
    rep = json.loads((out / "report.json").read_text())
    assert rep["checks"]["cover"]["passed"]


def test_chain_constant_f_root_integral(tmp_path):
    out = tmp_path / "out"
    p = spec_file(tmp_path, chain_spec(f={"kind": "constant", "value": 1.0}))
    assert main(["decompose", "--domain", p, "--out", str(out)]) == 0
    ints = [float(r["integral"]) for r in rows(out / "parts.csv")]
    assert ints[0] == pytest.approx(4.0, abs=1e-12)
    assert abs(ints[1]) < 1e-12 and abs(ints[2]) < 1e-12


def test_cusp_decompose_row_count(tmp_path):
    out = tmp_path / "out"
    code = main(["decompose", "--domain", str(CONFIGS / "cusp.json"), "--depth", "4", "--h", "0.0078125",
                 "--out", str(out)])
    assert code == 0
    assert len(rows(out / "parts.csv")) == 5


def test_invalid_p_message(tmp_path, capsys):
    code = main(["decompose", "--domain", str(CONFIGS / "chain.json"), "--p", "1", "--out", str(tmp_path)])
    assert code == 3
    assert "p > 1" in capsys.readouterr().err


def test_no_args_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 3


def test_empty_config(tmp_path):
    assert main(["verify", "--domain", spec_file(tmp_path, {}), "--out", str(tmp_path / "o")]) == 3


def test_broken_json_reports_position(tmp_path):
    p = spec_file(tmp_path, '{"family": "cusp",\n  "h": }')
    with pytest.raises(SpecError, match="line 2"):
        load_spec(p)


def test_schema_field_path(tmp_path):
    p = spec_file(tmp_path, {"family": "cusp", "profile": {"kind": "power"}, "h": -1})
    with pytest.raises(SpecError, match="h"):
        load_spec(p)


def test_h_power_of_two():
    with pytest.raises(SpecError):
        RunConfig(spec={"family": "cusp"}, family="cusp", h=0.1)


def test_misdeclared_profile_exit_code(tmp_path):
    spec = json.loads((CONFIGS / "cusp.json").read_text())
    spec["profile"]["K1"] = 0.1
    assert main(["solve", "--domain", spec_file(tmp_path, spec), "--out", str(tmp_path / "o")]) == 6


def test_nonzero_mean_exit_code(tmp_path):
    p = spec_file(tmp_path, chain_spec(f={"kind": "constant", "value": 1.0}))
    assert main(["solve", "--domain", p, "--out", str(tmp_path / "o")]) == 7


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DIVTREE_THREADS", "many")
    assert main(["verify", "--domain", str(CONFIGS / "chain.json"), "--out", str(tmp_path)]) == 3


def test_verify_whitney_rows(tmp_path):
    out = tmp_path / "v"
    assert main(["verify", "--domain", str(CONFIGS / "lshape.json"), "--out", str(out)]) == 0
    st = {r["check"]: r["status"] for r in rows(out / "verify.csv")}
    assert st["whitney_geometry"] == "pass"
    assert all(v in ("pass", "n/a") for v in st.values())


def test_verify_holder_flat_rows(tmp_path):
    spec = {"family": "holder", "profile": {"kind": "flat", "l": 0.25, "height": 2.5}, "depth": 8,
            "h": 1 / 64, "p": 2, "kappa": 1, "seed": 0}
    out = tmp_path / "v"
    assert main(["verify", "--domain", spec_file(tmp_path, spec), "--out", str(out)]) == 0
    st = {r["check"]: r["status"] for r in rows(out / "verify.csv")}
    assert st["dG_bracket"] == "pass"
    assert st["cover"] == "pass" and st["disjointness"] == "pass"


def test_solve_lshape_coarse(tmp_path):
    out = tmp_path / "s"
    code = main(["solve", "--domain", str(CONFIGS / "lshape.json"), "--h", "0.03125", "--depth", "3",
                 "--out", str(out)])
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["constants"]["C_emp"] <= rep["constants"]["C_theory"]
    for name in ("u.csv", "u.bin", "residual.csv", "f.csv", "omega_bar.csv", "cubes.csv"):
        assert (out / name).exists()


def test_solve_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for o in (a, b):
        assert main(["solve", "--domain", str(CONFIGS / "chain.json"), "--seed", "11", "--out", str(o)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_report(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["decompose", "--domain", str(CONFIGS / "lshape.json"), "--out", str(out)]) == 0
    assert main(["report", "--out", str(out)]) == 0
    text = (out / "summary.txt").read_text()
    assert "family: whitney" in text
    outl = rows(out / "outlines.csv")
    assert len(outl) == 5 * len(rows(out / "cubes.csv"))


def test_report_missing_dir(tmp_path):
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 3


def test_parser_flags():
    args = build_parser().parse_args(["solve", "--domain", "x.json", "--h", "0.5", "--kappa", "2", "--seed", "3"])
    assert (args.h, args.kappa, args.seed, args.p) == (0.5, 2.0, 3, None)
