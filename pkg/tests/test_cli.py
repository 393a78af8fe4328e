import csv
import json

import numpy as np
import pytest

from vortopt import cli
from vortopt.cli import ConfigError, main, parse_config, read_polyline
from vortopt.mesh import ChannelGeometry, build_channel_mesh, write_mesh

COARSE = """
[mesh]
h_min = 0.05
h_max = 0.1
adapt_initial = false
"""


def write_config(tmp_path, body, name="exp.ini"):
    p = tmp_path / name
    p.write_text(body)
    return p


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


class TestParse:
    def test_presets_parse(self):
        from pathlib import Path

        root = Path(__file__).resolve().parents[1] / "configs"
        specs = {p.stem: parse_config(p) for p in sorted(root.glob("*.ini"))}
        assert {"curl_dF", "curl_aL", "detgrad_dF", "detgrad_aL", "mixed_dF"} <= set(specs)
        c = specs["curl_aL"].config
        assert (c.algorithm, c.alpha, c.ell0, c.b0, c.tau_mult, c.b_bar) == ("aL", 6.0, 20.0, 1e-4, 1.05, 10.0)
        d = specs["detgrad_dF"].config
        assert (d.gamma1, d.gamma2, d.alpha) == (0.0, 1.0, 1.0)
        sweep = specs["mixed_dF"].sweep
        assert [s[0] for s in sweep] == list(range(1, 11))
        assert sweep[0][1:] == (6.0, 1.0, 1.0) and sweep[-1][1:] == (15.0, 1.0, 10.0)

    def test_overrides(self, tmp_path):
        p = write_config(tmp_path, "[run]\nmax_iter = 7\n")
        spec = parse_config(p, {"max_iter": 3, "tol": 1e-3, "seed": None})
        assert spec.config.max_iter == 3 and spec.config.tol == 1e-3 and spec.name == "exp"

    @pytest.mark.parametrize("body,needle", [
        ("[objective]\nalpha = x\n", "alpha"),
        ("[objective]\nbeta_typo = 1\n", "beta_typo"),
        ("[nonsense]\na = 1\n", "nonsense"),
        ("[descent]\nbeta = -1\n", "beta"),
        ("[geometry]\nradius = 0.6\n", "geometry"),
        ("no section header\n", "exp.ini"),
        ("[sweep]\nconfigurations = 0-3\n", "configuration"),
        ("[mesh]\nfile = m.msh\n", "gmsh"),
    ])
    def test_errors_name_the_field(self, tmp_path, body, needle):
        with pytest.raises(ConfigError, match=needle):
            parse_config(write_config(tmp_path, body))

    def test_geometry_section(self, tmp_path):
        p = write_config(tmp_path, "[geometry]\ncorners = 0 -1 0 1 3 1 3 -1\ncenter = 0.5 0.1\nradius = 0.2\n")
        g = parse_config(p).config.geometry
        assert g.obstacle_center == (0.5, 0.1) and g.obstacle_radius == 0.2 and g.bounds == (0, 3, -1, 1)


class TestRun:
    def test_max_iter_zero(self, workdir):
        cfg = write_config(workdir, COARSE)
        assert main(["run", str(cfg), "--out", "o", "--max-iter", "0"]) == 0
        rows = list(csv.reader(open(workdir / "o" / "iterations.csv")))
        assert len(rows) == 2 and rows[1][0] == "0"
        assert all("[" in h for h in rows[0])
        summary = json.loads((workdir / "o" / "summary.json").read_text())
        assert summary["iterations"] == 0 and summary["objective_change_percent"] == 0.0
        assert (workdir / "o" / "vtk" / "iter_0000.vtk").exists()
        assert not (workdir / "o" / "ERROR").exists()

    def test_outputs_and_determinism(self, workdir):
        cfg = write_config(workdir, COARSE + "[output]\nvtk_every = 1\n")
        assert main(["run", str(cfg), "--out", "a", "--max-iter", "2", "--seed", "3"]) == 0
        assert main(["run", str(cfg), "--out", "b", "--max-iter", "2", "--seed", "3"]) == 0
        for name in ("iterations.csv", "polylines.csv", "final_polyline.csv"):
            assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
        for name in ("objective.svg", "volume.svg"):
            assert (workdir / "a" / name).read_text().startswith("<svg")
        summary = json.loads((workdir / "a" / "summary.json").read_text())
        assert summary["final_objective"] < summary["initial_objective"]
        assert summary["config"]["seed"] == 3
        header = next(csv.reader(open(workdir / "a" / "iterations.csv")))
        names = [h.split(" [")[0] for h in header]
        assert names[:12] == ["iteration", "j1", "j2", "perimeter", "volume", "objective", "lagrangian", "t_k",
                              "retries", "ell", "b", "min_angle"]
        assert len(list((workdir / "a" / "vtk").glob("iter_*.vtk"))) == 3

    def test_compare_reports_hausdorff(self, workdir):
        ref = workdir / "ref.csv"
        mesh = build_channel_mesh(ChannelGeometry(), 0.05, 0.1)
        cli.write_polyline(ref, mesh.free_polyline)
        cfg = write_config(workdir, COARSE + f"[compare]\ninitial = {ref}\n")
        assert main(["run", str(cfg), "--out", "o", "--max-iter", "0"]) == 0
        summary = json.loads((workdir / "o" / "summary.json").read_text())
        assert summary["hausdorff"]["initial"] == pytest.approx(0.0, abs=1e-12)

    def test_mesh_file(self, workdir):
        mesh = build_channel_mesh(ChannelGeometry(), 0.05, 0.1)
        write_mesh(mesh, workdir / "m.txt")
        cfg = write_config(workdir, "[mesh]\nfile = m.txt\n")
        spec = parse_config(cfg)
        assert spec.mesh_file.name == "m.txt"
        assert main(["run", str(cfg), "--out", "o", "--max-iter", "0"]) == 0
        poly = read_polyline(workdir / "o" / "final_polyline.csv")
        assert np.allclose(poly, mesh.free_polyline)

    def test_config_error_exit(self, workdir):
        assert main(["run", "missing.ini"]) == 1
        bad = write_config(workdir, "[objective]\nalpha = nope\n")
        assert main(["run", str(bad)]) == 1

    def test_solver_failure_exit(self, workdir, monkeypatch):
        from vortopt.fem import SolverError

        def boom(*args, **kwargs):
            raise SolverError("synthetic")

        monkeypatch.setattr(cli, "optimize", boom)
        cfg = write_config(workdir, COARSE)
        assert main(["run", str(cfg), "--out", "o"]) == 2
        assert "synthetic" in (workdir / "o" / "ERROR").read_text()


class TestSweep:
    def test_two_configurations(self, workdir):
        mesh = build_channel_mesh(ChannelGeometry(), 0.05, 0.1)
        cli.write_polyline(workdir / "c.csv", mesh.free_polyline)
        cfg = write_config(workdir, COARSE + "[sweep]\nconfigurations = 1, 2\n[compare]\ncurl = c.csv\n")
        assert main(["sweep", str(cfg), "--out", "s", "--max-iter", "0"]) == 0
        assert (workdir / "s" / "config_01" / "iterations.csv").exists()
        assert (workdir / "s" / "config_02" / "iterations.csv").exists()
        rows = list(csv.reader(open(workdir / "s" / "hausdorff_trend.csv")))
        assert rows[0][0].startswith("configuration") and rows[0][-1].startswith("hausdorff_curl")
        assert [r[:4] for r in rows[1:]] == [["1", "6.0", "1.0", "1.0"], ["2", "7.0", "1.0", "2.0"]]
        assert float(rows[1][4]) == pytest.approx(0.0, abs=1e-12)

    def test_sweep_needs_configurations(self, workdir):
        cfg = write_config(workdir, COARSE)
        assert main(["sweep", str(cfg)]) == 1


class TestHausdorffVerb:
    def test_prints_distance(self, workdir, capsys):
        a = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
        cli.write_polyline(workdir / "a.csv", a)
        cli.write_polyline(workdir / "b.csv", a + [0.1, 0])
        assert main(["hausdorff", "a.csv", "b.csv"]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(0.1)

    def test_headerless_input(self, workdir, capsys):
        (workdir / "a.csv").write_text("0,0\n1,0\n1,1\n0,1\n")
        (workdir / "b.csv").write_text("0,0\n1,0\n1,1\n0,1\n")
        assert main(["hausdorff", "a.csv", "b.csv"]) == 0
        assert float(capsys.readouterr().out) == 0.0

    def test_bad_file(self, workdir):
        (workdir / "a.csv").write_text("")
        assert main(["hausdorff", "a.csv", "a.csv"]) == 1


class TestValidate:
    def test_quick_passes(self, capsys):
        assert main(["validate", "--quick"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert len(out) >= 6 and all(line.startswith("PASS") for line in out)
        assert any("h(2) = 1.6" in line for line in out)

    def test_failure_exit_code(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "validate", lambda quick=False: [("synthetic", False, "broken")])
        assert main(["validate"]) == 3
        assert "FAIL" in capsys.readouterr().out
