import csv
import json
import os

import numpy as np
import pytest

from mvrender.cli import run, MASK_RATIO_GRID

TINY = {
    "image_size": 16, "patch": 4, "embed": 16, "vit_depth": 1, "heads": 2,
    "volume_x": 6, "volume_y": 6, "volume_z": 4, "c_volume": 8, "l_max": 0,
    "c_semantic": 4, "num_classes": 4, "n_coarse": 6, "n_fine": 2,
    "pixels_per_view": 12, "n_views": 2, "steps": 4, "attn_points": 2,
    "seed": 3,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset + tiny config + one pretraining run, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    data = root / "data"
    assert run(["scenes", "gen", "--n", "2", "--seed", "5",
                "--out", str(data), "--views", "2", "--size", "16",
                "--classes", "4", "--semantic-dim", "4"]) == 0
    out = root / "run"
    assert run(["pretrain", "--config", str(cfg_path),
                "--data", str(data), "--out", str(out)]) == 0
    return {"root": root, "config": cfg_path, "data": data, "run": out,
            "ckpt": out / "checkpoint.bin"}


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "subcommand" in capsys.readouterr().out.lower() or True


def test_unknown_subcommand_exits_two(capsys):
    assert run(["frobnicate"]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_no_subcommand_exits_two(capsys):
    assert run([]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_flag_rejected(capsys):
    assert run(["gradcheck", "--frobnicate"]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_print_config_shows_band_defaults(capsys):
    assert run(["--print-config"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["near_t"] == 0.05
    assert data["free_alpha"] == 5.0
    assert data["_sources"]["free_alpha"] == "reference recipe constant"


def test_print_config_round_trips(tmp_path, capsys):
    assert run(["--print-config"]) == 0
    first = capsys.readouterr().out
    p = tmp_path / "cfg.json"
    p.write_text(first)
    assert run(["--print-config", "--config", str(p)]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads(first)


def test_bad_config_value_exits_two(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"mask_ratio": 1.5}))
    assert run(["--print-config", "--config", str(p)]) == 2
    assert "mask_ratio" in capsys.readouterr().err


def test_missing_config_file_exits_two(tmp_path, capsys):
    assert run(["pretrain", "--config", str(tmp_path / "nope.json"),
                "--data", "x", "--out", "y"]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_pretrain_outputs(workdir):
    out = workdir["run"]
    assert (out / "checkpoint.bin").is_file()
    assert (out / "metrics.csv").is_file()
    assert (out / "metrics.png").is_file()
    with open(out / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == TINY["steps"]


def test_pretrain_data_config_mismatch_exits_one(workdir, tmp_path, capsys):
    cfg = dict(TINY)
    cfg["c_semantic"] = 8  # dataset teacher carries 4
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert run(["pretrain", "--config", str(p),
                "--data", str(workdir["data"]),
                "--out", str(tmp_path / "out")]) == 1
    assert "teacher" in capsys.readouterr().err


def test_render_writes_image_and_figure(workdir, tmp_path):
    out = tmp_path / "render"
    assert run(["render", "--ckpt", str(workdir["ckpt"]),
                "--data", str(workdir["data"]), "--scene", "scene_0000",
                "--view", "1", "--out", str(out)]) == 0
    assert (out / "scene_0000_view01.ppm").is_file()
    assert (out / "scene_0000_view01.png").is_file()


def test_render_unknown_scene_exits_one(workdir, tmp_path, capsys):
    assert run(["render", "--ckpt", str(workdir["ckpt"]),
                "--data", str(workdir["data"]), "--scene", "nope",
                "--view", "0", "--out", str(tmp_path / "r")]) == 1
    assert "not found" in capsys.readouterr().err


def test_features_writes_maps_and_figure(workdir, tmp_path):
    out = tmp_path / "features"
    assert run(["features", "--ckpt", str(workdir["ckpt"]),
                "--data", str(workdir["data"]), "--out", str(out)]) == 0
    ppms = sorted(out.glob("*_pca*.ppm"))
    assert len(ppms) == 2
    assert (out / "scene_0000_features.png").is_file()


def test_probe_pose_writes_report_and_figure(workdir, tmp_path):
    out = tmp_path / "probe"
    assert run(["probe", "pose", "--ckpt", str(workdir["ckpt"]),
                "--data", str(workdir["data"]), "--out", str(out),
                "--pairs", "16", "--seed", "1"]) == 0
    report = json.loads((out / "pose_errors.json").read_text())
    assert set(report) == {"mean_trans", "mean_rot", "n", "seed"}
    assert report["seed"] == 1 and report["n"] > 0
    assert (out / "pose_errors.png").is_file()


def test_probe_without_pose_exits_two(capsys):
    assert run(["probe"]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_ablate_mask_ratio_grid(workdir, tmp_path):
    out = tmp_path / "ab"
    assert run(["ablate", "--axis", "mask_ratio",
                "--config", str(workdir["config"]),
                "--data", str(workdir["data"]), "--out", str(out)]) == 0
    with open(out / "ablation.csv") as f:
        rows = list(csv.DictReader(f))
    assert [float(r["value"]) for r in rows] == list(MASK_RATIO_GRID)
    assert (out / "ablation.png").is_file()


def test_ablate_loss_rows_zero_out_disabled_terms(workdir, tmp_path):
    out = tmp_path / "abloss"
    assert run(["ablate", "--axis", "loss",
                "--config", str(workdir["config"]),
                "--data", str(workdir["data"]), "--out", str(out)]) == 0
    with open(out / "ablation.csv") as f:
        rows = {r["value"]: r for r in csv.DictReader(f)}
    assert set(rows) == {"no_color", "no_depth", "no_semantic"}
    assert float(rows["no_color"]["color"]) == 0.0
    assert float(rows["no_semantic"]["semantic"]) == 0.0
    # band terms are built from observed depth, so they follow its toggle
    for term in ("depth", "sdf_near", "free"):
        assert float(rows["no_depth"][term]) == 0.0
    assert float(rows["no_color"]["depth"]) > 0.0


def test_ablate_invalid_axis_exits_two(capsys):
    assert run(["ablate", "--axis", "bogus", "--out", "x"]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_gradcheck_quick_writes_report(tmp_path, capsys):
    out = tmp_path / "gc"
    assert run(["gradcheck", "--instances", "1", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "checks passed" in text
    with open(out / "gradcheck.csv") as f:
        rows = list(csv.DictReader(f))
    names = {r["name"] for r in rows}
    assert {"encode_view", "build_volume", "render_pixel"} <= names
    assert all(r["passed"] == "1" for r in rows)
    assert (out / "gradcheck.png").is_file()


def test_scenes_gen_regenerates_identically(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["scenes", "gen", "--n", "1", "--seed", "9",
                    "--out", str(out), "--views", "2", "--size", "16"]) == 0
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert fa == fb
    for rel in fa:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
