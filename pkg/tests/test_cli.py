import json

import pytest

from surfsense.cli import build_parser, build_train_config, main
from surfsense.dataio import read_pfm, read_ply
from surfsense.losses import NumericalAbort
from surfsense.training import Trainer, read_log

TINY = {"batch_rays": 32, "chunk_rays": 32, "n_coarse": 8, "n_fine": 8, "eikonal_uniform": 16,
        "model": {"sdf": {"hidden": 16, "layers": 2, "frequencies": 2}, "color": {"hidden": 16, "layers": 2}}}


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def trained(small_sphere, tiny_cfg, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    code = main(["train", str(small_sphere), "-o", str(run), "--desk", "--config", str(tiny_cfg),
                 "--epochs", "3", "--threads", "1", "-q"])
    assert code == 0
    return run


def test_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen-scene", "train", "extract", "eval", "render"):
        assert cmd in out


def test_no_command_is_usage_error():
    assert main([]) == 1


def test_bad_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "error" in capsys.readouterr().err


def test_gen_scene(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["gen-scene", "--preset", "sphere", "-o", str(out), "--views", "4", "--width", "16",
                 "--height", "16", "--mesh-res", "24"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["out"] == str(out)
    assert (out / "scene.json").exists() and (out / "gt_mesh.ply").exists()
    assert len(list((out / "rgb").iterdir())) == 4


def test_gen_scene_from_spec(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"primitives": [{"kind": "sphere", "radius": 0.5}],
                                "bbox": [[-1, -1, -1], [1, 1, 1]], "views": 3, "width": 12, "height": 12}))
    assert main(["gen-scene", "--spec", str(spec), "-o", str(tmp_path / "ds"), "--mesh-res", "16"]) == 0


def test_gen_scene_argument_errors(tmp_path):
    assert main(["gen-scene", "-o", str(tmp_path)]) == 1
    assert main(["gen-scene", "--preset", "castle", "-o", str(tmp_path)]) == 1
    assert main(["gen-scene", "--spec", str(tmp_path / "none.json"), "-o", str(tmp_path)]) == 2


def test_config_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"epochs": 7, "lr": 1e-3, "patch": {"J": 16}}))
    args = build_parser().parse_args(["train", "ds", "-o", "x", "--desk", "--config", str(p), "--lr", "5e-4",
                                      "--no-wj", "--tau-mult", "2", "--lambda4", "0"])
    cfg = build_train_config(args)
    assert cfg.epochs == 7 and cfg.lr == 5e-4 and cfg.patch.J == 16 and cfg.patch.tau_mult == 2.0
    assert not cfg.use_wj and cfg.weights.lambda4 == 0.0 and cfg.iters_per_epoch == 2


def test_train_outputs(trained):
    rows = read_log(trained / "train_log.csv")
    assert len(rows) == 6
    assert (trained / "loss_curve.png").stat().st_size > 0
    assert (trained / "model.ssdf").exists() and (trained / "config.json").exists()


def test_train_errors(small_sphere, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": -3}))
    assert main(["train", str(small_sphere), "-o", str(tmp_path / "r"), "--config", str(bad)]) == 1
    assert main(["train", str(small_sphere), "-o", str(tmp_path / "r"), "--patch-J", "0"]) == 1
    assert main(["train", str(tmp_path / "missing"), "-o", str(tmp_path / "r")]) == 2


def test_train_numerical_abort_exit_code(small_sphere, tiny_cfg, tmp_path, monkeypatch):
    def boom(self, it, counts, epoch):
        raise NumericalAbort("eikonal", float("nan"))

    monkeypatch.setattr(Trainer, "uniform_job", boom)
    code = main(["train", str(small_sphere), "-o", str(tmp_path), "--desk", "--config", str(tiny_cfg),
                 "--epochs", "1", "--threads", "1", "-q"])
    assert code == 3
    assert (tmp_path / "last_good.ssdf").exists()


def test_extract_eval_render(trained, small_sphere, tmp_path, capsys):
    mesh = tmp_path / "mesh.ply"
    assert main(["extract", str(trained / "model.ssdf"), "-o", str(mesh), "--resolution", "24"]) == 0
    v, f, _ = read_ply(mesh)
    assert len(v) > 0 and len(f) > 0
    capsys.readouterr()

    prefix = tmp_path / "ev" / "metrics"
    code = main(["eval", str(mesh), str(small_sphere / "gt_mesh.ply"), "-o", str(prefix), "--points", "2000",
                 "--scene", str(small_sphere)])
    assert code == 0
    rep = json.loads(prefix.with_suffix(".json").read_text())
    assert 0 <= rep["f_score"] <= 1 and rep["chamfer_l1"] > 0
    assert prefix.with_suffix(".csv").read_text().count("\n") == 2
    assert (tmp_path / "ev" / "metrics_hist.png").stat().st_size > 0
    capsys.readouterr()

    out = tmp_path / "r" / "v1"
    assert main(["render", str(trained / "model.ssdf"), str(small_sphere), "--view", "1", "-o", str(out),
                 "--n-coarse", "8", "--n-fine", "8"]) == 0
    assert json.loads(capsys.readouterr().out)["view"] == 1
    assert read_pfm(tmp_path / "r" / "v1_depth.pfm").shape == (32, 32)
    assert read_pfm(tmp_path / "r" / "v1_normal.pfm").shape == (32, 32, 3)
    assert (tmp_path / "r" / "v1_rgb.png").exists()


def test_eval_self_is_perfect(small_sphere, tmp_path, capsys):
    gt = str(small_sphere / "gt_mesh.ply")
    assert main(["eval", gt, gt, "-o", str(tmp_path / "m"), "--points", "3000", "--threshold", "0.2"]) == 0
    rep = json.loads((tmp_path / "m.json").read_text())
    assert rep["f_score"] > 0.99


def test_missing_inputs_are_data_errors(small_sphere, tmp_path):
    assert main(["extract", str(tmp_path / "none.ssdf"), "-o", str(tmp_path / "m.ply")]) == 2
    assert main(["eval", str(tmp_path / "a.ply"), str(tmp_path / "b.ply"), "-o", str(tmp_path / "x")]) == 2
    garbage = tmp_path / "g.ssdf"
    garbage.write_bytes(b"not a checkpoint")
    assert main(["render", str(garbage), str(small_sphere), "-o", str(tmp_path / "r")]) == 2


def test_render_view_out_of_range(trained, small_sphere, tmp_path):
    assert main(["render", str(trained / "model.ssdf"), str(small_sphere), "--view", "99",
                 "-o", str(tmp_path / "r")]) == 1


def test_extract_empty_field(small_sphere, tmp_path):
    # a checkpoint whose field never crosses zero inside the box
    ck = tmp_path / "run"
    main(["train", str(small_sphere), "-o", str(ck), "--desk", "--epochs", "0", "--init-radius", "50",
          "--threads", "1", "-q"])
    assert main(["extract", str(ck / "model.ssdf"), "-o", str(tmp_path / "m.ply"), "--resolution", "12"]) == 2
