"""End-to-end tests for the command-line surface: config handling, fit
directories, eval reports, OpenSCAD export, and inspect summaries."""

import json
import os

import numpy as np
import pytest

import shapes
from d2csg import cli
from d2csg import network as nw
from d2csg.extract import CsgTree, Leaf, save_tree
from d2csg.geometry import TriangleMesh
from d2csg.network import HyperParams
from d2csg.scadlint import lint_scad
from d2csg.trainer import TrainingAbort


@pytest.fixture(scope="module")
def box_obj(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("meshes") / "box.obj"
    shapes.write_obj(shapes.box_mesh(half=0.5), path)
    return str(path)


class TestConfig:
    def test_defaults(self):
        cfg = cli.config_from_dict({})
        assert cfg.res == 128
        assert cfg.hyperparams == HyperParams()
        assert cfg.input == "" and cfg.out == ""

    def test_unknown_top_key_rejected(self):
        with pytest.raises(cli.CliError, match="unknown config keys"):
            cli.config_from_dict({"bogus": 1})

    def test_unknown_hyperparameter_rejected(self):
        with pytest.raises(cli.CliError, match="unknown hyperparameter keys"):
            cli.config_from_dict({"hyperparams": {"warp": 9}})

    def test_json_roundtrip(self):
        cfg = cli.RunConfig(input="a.obj", input_kind="mesh", out="d", res=64,
                            hyperparams=HyperParams(p=8, c=2, seed=11))
        back = cli.config_from_dict(json.loads(json.dumps(cfg.to_json_dict())))
        assert back == cfg

    @pytest.mark.parametrize("patch, message", [
        (dict(input_kind="voxels"), "unknown input kind"),
        (dict(input=""), "no input path"),
        (dict(out=""), "no output directory"),
        (dict(res=8), "resolution must be >= 16"),
    ])
    def test_validate_rejections(self, patch, message):
        base = dict(input="a.obj", input_kind="mesh", out="d", res=64)
        base.update(patch)
        cfg = cli.RunConfig(**base)
        with pytest.raises(cli.CliError, match=message):
            cfg.validate()

    def test_validate_wraps_hyperparam_errors(self):
        cfg = cli.RunConfig(input="a.obj", input_kind="mesh", out="d",
                            hyperparams=HyperParams(p=0))
        with pytest.raises(cli.CliError):
            cfg.validate()

    def test_flags_override_config(self):
        args = cli.build_parser().parse_args(
            ["fit", "--mesh", "m.obj", "--out", "o", "--seed", "9",
             "--p", "8", "--alpha", "0.3", "--res", "32"])
        cfg = cli.RunConfig(hyperparams=HyperParams(seed=5, p=64))
        cfg = cli._merge_flags(cfg, args)
        assert cfg.hyperparams.seed == 9
        assert cfg.hyperparams.p == 8
        assert cfg.hyperparams.alpha == 0.3
        assert cfg.res == 32
        assert cfg.input == "m.obj" and cfg.input_kind == "mesh"
        assert cfg.out == "o"

    def test_absent_flags_keep_config_values(self):
        args = cli.build_parser().parse_args(
            ["fit", "--mesh", "m.obj", "--out", "o"])
        cfg = cli._merge_flags(cli.RunConfig(hyperparams=HyperParams(seed=5)), args)
        assert cfg.hyperparams.seed == 5

    def test_thread_cap(self, monkeypatch):
        monkeypatch.delenv("D2CSG_THREADS", raising=False)
        assert cli._thread_cap() is None
        monkeypatch.setenv("D2CSG_THREADS", "2")
        assert cli._thread_cap() == 2
        monkeypatch.setenv("D2CSG_THREADS", "zero")
        with pytest.raises(cli.CliError, match="must be an integer"):
            cli._thread_cap()
        monkeypatch.setenv("D2CSG_THREADS", "0")
        with pytest.raises(cli.CliError, match=">= 1"):
            cli._thread_cap()


class TestParser:
    def test_unknown_flag_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["fit", "--bogus"])
        assert exc.value.code == 1

    def test_missing_command_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == 1

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0
        assert "d2csg" in capsys.readouterr().out


class TestFit:
    def test_run_directory_contents(self, cli_fit_runs):
        run, _, metrics = cli_fit_runs
        for name in ("model.d2cm", "tree.json", "recon.obj", "metrics.json",
                     "dropout.json", "config.json", "train.log"):
            assert os.path.isfile(os.path.join(run, name)), name
        assert {"cd", "nc", "ecd"} <= set(metrics)
        assert np.isfinite(metrics["cd"])

    def test_config_snapshot_revalidates(self, cli_fit_runs):
        run, _, _ = cli_fit_runs
        with open(os.path.join(run, "config.json"), encoding="utf-8") as fh:
            cfg = cli.config_from_dict(json.load(fh))
        cfg.validate()
        assert cfg.hyperparams.seed == 3
        assert cfg.hyperparams.p == 16
        assert cfg.input_kind == "mesh"

    def test_train_log_lines(self, cli_fit_runs):
        run, _, _ = cli_fit_runs
        with open(os.path.join(run, "train.log"), encoding="utf-8") as fh:
            log = fh.read()
        assert "seed: 3" in log
        assert "stage 2 final loss:" in log
        assert "iterations: 1800" in log

    def test_missing_input_exits_one(self, tmp_path):
        code = cli.main(["fit", "--mesh", str(tmp_path / "ghost.obj"),
                         "--out", str(tmp_path / "out")])
        assert code == 1

    def test_fit_needs_out(self, box_obj):
        assert cli.main(["fit", "--mesh", box_obj]) == 1

    def test_fit_needs_input(self, tmp_path):
        assert cli.main(["fit", "--out", str(tmp_path / "out")]) == 1

    def test_bad_resolution_exits_one(self, box_obj, tmp_path):
        code = cli.main(["fit", "--mesh", box_obj, "--res", "8",
                         "--out", str(tmp_path / "out")])
        assert code == 1

    def test_config_file_errors_exit_one(self, tmp_path):
        missing = str(tmp_path / "none.json")
        assert cli.main(["fit", "--config", missing, "--out", "o"]) == 1
        bad = tmp_path / "bad.json"
        bad.write_text("{ not json")
        assert cli.main(["fit", "--config", str(bad), "--out", "o"]) == 1
        arr = tmp_path / "arr.json"
        arr.write_text("[1, 2]")
        assert cli.main(["fit", "--config", str(arr), "--out", "o"]) == 1
        unknown = tmp_path / "unknown.json"
        unknown.write_text('{"warp": 9}')
        assert cli.main(["fit", "--config", str(unknown), "--out", "o"]) == 1

    def test_fit_from_config_file(self, tmp_path, capsys):
        sphere = tmp_path / "sphere.obj"
        shapes.write_obj(shapes.icosphere(), sphere)
        out = tmp_path / "run"
        cfg = {"input": str(sphere), "input_kind": "mesh", "out": str(out),
               "res": 32,
               "hyperparams": {"p": 8, "c": 2, "iters_per_stage": 100,
                               "dropout_interval": 50, "batch": 512,
                               "seed": 1}}
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        assert cli.main(["fit", "--config", str(path)]) == 0
        assert os.path.isfile(out / "model.d2cm")
        printed = json.loads(capsys.readouterr().out)
        assert "cd" in printed or "error" in printed

    def test_batch_fit_reports_failures(self, tmp_path, capsys):
        root = tmp_path / "inputs"
        root.mkdir()
        shapes.write_obj(shapes.icosphere(), root / "good.obj")
        (root / "broken.obj").write_text("not a mesh\n")
        code = cli.main(["fit", "--mesh", str(root), "--out",
                         str(tmp_path / "runs"), "--p", "8", "--c", "2",
                         "--iters", "60", "--seed", "1"])
        captured = capsys.readouterr()
        assert code == 1
        assert "broken" in captured.out
        assert "good.obj: ok" in captured.out
        assert "1 of 2 fits failed" in captured.err
        assert os.path.isfile(tmp_path / "runs" / "good" / "model.d2cm")

    def test_empty_batch_directory_exits_one(self, tmp_path):
        root = tmp_path / "empty"
        root.mkdir()
        code = cli.main(["fit", "--mesh", str(root),
                         "--out", str(tmp_path / "runs")])
        assert code == 1

    def test_training_abort_exits_two(self, box_obj, tmp_path, monkeypatch):
        def explode(occ, hp, transform=None):
            raise TrainingAbort(0, 1, np.arange(8), float("nan"))

        monkeypatch.setattr(cli, "fit_shape", explode)
        code = cli.main(["fit", "--mesh", box_obj,
                         "--out", str(tmp_path / "out")])
        assert code == 2


class TestEval:
    def test_self_eval_is_perfect(self, box_obj, capsys):
        assert cli.main(["eval", box_obj, "--mesh", box_obj]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["cd"] == 0.0
        assert report["nc"] == pytest.approx(1.0, abs=1e-9)
        assert report["ecd"] == 0.0
        assert report["numP"] is None

    def test_checkpoint_eval_fills_compactness(self, cli_fit_runs,
                                               gt_sphere_obj, capsys):
        run, _, _ = cli_fit_runs
        model = os.path.join(run, "model.d2cm")
        code = cli.main(["eval", model, "--mesh", gt_sphere_obj, "--res", "64"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["numP"] >= 1
        assert report["numIS"] >= 1
        assert np.isfinite(report["cd"])

    def test_report_written_to_file(self, box_obj, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert cli.main(["eval", box_obj, "--mesh", box_obj,
                         "--out", str(out)]) == 0
        assert out.read_text() == capsys.readouterr().out

    def test_batch_eval_appends_mean_row(self, tmp_path, capsys):
        recon = tmp_path / "recon"
        truth = tmp_path / "truth"
        recon.mkdir(), truth.mkdir()
        for name, half in (("a", 0.5), ("b", 0.4)):
            shapes.write_obj(shapes.box_mesh(half=half), recon / f"{name}.obj")
            shapes.write_obj(shapes.box_mesh(half=half), truth / f"{name}.obj")
        shapes.write_obj(shapes.box_mesh(half=0.3), recon / "orphan.obj")
        code = cli.main(["eval", str(recon), "--mesh", str(truth)])
        captured = capsys.readouterr()
        assert code == 0
        assert "no ground truth for orphan" in captured.err
        rows = [json.loads(line) for line in captured.out.splitlines()]
        assert [r["shape"] for r in rows] == ["a", "b", "mean"]
        # b.obj spans 0.8 of the unit box; truth is normalized up to 1.0
        assert rows[0]["cd"] == 0.0
        assert rows[1]["cd"] > 0.0
        assert rows[2]["cd"] == pytest.approx(
            np.mean([rows[0]["cd"], rows[1]["cd"]]))

    def test_unnormalized_recon_warns(self, tmp_path, gt_sphere_obj, capsys):
        sph = shapes.icosphere(subdiv=2)
        big = TriangleMesh(vertices=sph.vertices * 3.0, faces=sph.faces)
        path = tmp_path / "big.obj"
        shapes.write_obj(big, path)
        assert cli.main(["eval", str(path), "--mesh", gt_sphere_obj]) == 0
        assert "unnormalized" in capsys.readouterr().err

    def test_eval_rejects_unknown_extension(self, tmp_path, box_obj):
        path = tmp_path / "model.txt"
        path.write_text("nope")
        assert cli.main(["eval", str(path), "--mesh", box_obj]) == 1

    def test_eval_missing_truth_exits_one(self, box_obj, tmp_path):
        assert cli.main(["eval", box_obj,
                         "--mesh", str(tmp_path / "ghost.obj")]) == 1


class TestExport:
    def test_export_tree_json(self, cli_fit_runs, capsys):
        run, _, _ = cli_fit_runs
        tree_path = os.path.join(run, "tree.json")
        assert cli.main(["export", tree_path]) == 0
        out_path = capsys.readouterr().out.strip()
        assert out_path == os.path.join(run, "tree.scad")
        with open(out_path, encoding="utf-8") as fh:
            script = fh.read()
        assert lint_scad(script) == []
        assert "// d2csg: seed" not in script  # tree.json carries no seed

    def test_export_checkpoint_world_frame(self, cli_fit_runs, tmp_path, capsys):
        run, _, _ = cli_fit_runs
        model = os.path.join(run, "model.d2cm")
        out = str(tmp_path / "world.scad")
        assert cli.main(["export", model, "--world", "--out", out]) == 0
        with open(out, encoding="utf-8") as fh:
            script = fh.read()
        assert "// d2csg: seed 3" in script
        assert "// d2csg: world space" in script
        assert lint_scad(script) == []

    def test_export_no_classify_emits_polyhedra(self, cli_fit_runs, tmp_path):
        run, _, _ = cli_fit_runs
        out = str(tmp_path / "poly.scad")
        code = cli.main(["export", os.path.join(run, "tree.json"),
                         "--no-classify", "--out", out])
        assert code == 0
        with open(out, encoding="utf-8") as fh:
            script = fh.read()
        assert "polyhedron(points=" in script
        assert lint_scad(script) == []

    def test_export_world_without_transform_warns(self, tmp_path, capsys):
        tree = CsgTree(
            cover=[[Leaf(coeffs=(1, 1, 1, 0, 0, 0, -0.09), inverted=False,
                         row=0, branch="cover")]],
            residual=[])
        path = tmp_path / "tree.json"
        save_tree(tree, str(path))
        out = str(tmp_path / "flat.scad")
        assert cli.main(["export", str(path), "--world", "--out", out]) == 0
        assert "no stored transform" in capsys.readouterr().err
        with open(out, encoding="utf-8") as fh:
            assert "// d2csg: normalized space" in fh.read()

    def test_export_missing_input_exits_one(self, tmp_path):
        assert cli.main(["export", str(tmp_path / "ghost.json")]) == 1

    def test_export_rejects_unfinished_checkpoint(self, tmp_path):
        hp = HyperParams(p=8, c=2, code_size=4, hidden=4)
        model = nw.init_model(hp, np.random.default_rng(0))
        assert model.phase == 0
        path = str(tmp_path / "fresh.d2cm")
        nw.save_model(path, model)
        assert cli.main(["export", path]) == 1

    def test_export_rejects_other_extensions(self, tmp_path):
        path = tmp_path / "thing.scad"
        path.write_text("sphere(r=1);")
        assert cli.main(["export", str(path)]) == 1


class TestInspect:
    def test_inspect_json(self, cli_fit_runs, capsys):
        run, _, _ = cli_fit_runs
        assert cli.main(["inspect", os.path.join(run, "tree.json"),
                         "--json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["numP"] >= 1
        assert doc["numIS"] >= 1
        assert set(doc["branches"]) == {"cover", "residual"}
        assert doc["transform"] is not None
        assert "dropout" in doc  # dropout.json sits next to tree.json

    def test_inspect_text(self, cli_fit_runs, capsys):
        run, _, _ = cli_fit_runs
        assert cli.main(["inspect", os.path.join(run, "tree.json")]) == 0
        out = capsys.readouterr().out
        assert "primitives" in out
        assert "cover" in out

    def test_inspect_checkpoint(self, cli_fit_runs, capsys):
        run, _, _ = cli_fit_runs
        assert cli.main(["inspect", os.path.join(run, "model.d2cm")]) == 0
        assert "intermediate shapes" in capsys.readouterr().out

    def test_inspect_missing_input_exits_one(self, tmp_path):
        assert cli.main(["inspect", str(tmp_path / "ghost.json")]) == 1
