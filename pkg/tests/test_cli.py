import json

import numpy as np
import pytest

from hybridmap.cli import main
from hybridmap.datasets import write_poses
from hybridmap.meshing import read_ply
from hybridmap.core import Pose


@pytest.fixture(scope="module")
def sequence(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene.json"
    scene.write_text(json.dumps({"preset": "wall", "num_frames": 3, "width": 64, "height": 48}))
    seq = root / "seq"
    assert main(["synth", str(scene), str(seq), "--cell", "0.05"]) == 0
    return root, seq


@pytest.fixture(scope="module")
def run(sequence):
    root, seq = sequence
    out = root / "run"
    assert main(["map", str(seq), str(out), "--rays", "128", "--max-iters", "2", "--seed", "1"]) == 0
    return out


def test_synth_layout(sequence):
    _, seq = sequence
    assert len(list((seq / "color").glob("*.png"))) == 3
    assert (seq / "gt_mesh.ply").exists() and (seq / "bounds.json").exists()


def test_map_outputs(run):
    lines = [json.loads(x) for x in (run / "run_log.jsonl").read_text().splitlines()]
    assert [x["type"] for x in lines] == ["frame"] * 3 + ["summary"]
    summary = json.loads((run / "summary.json").read_text())
    assert summary["frames"] == 3 and summary["num_leaves"] > 0


def test_mesh(run, tmp_path):
    out = tmp_path / "m.ply"
    assert main(["mesh", str(run), str(out), "--color", "--cell", "0.025"]) == 0
    mesh = read_ply(out)
    assert mesh.num_faces > 0 and mesh.colors is not None


def test_render(run, sequence, tmp_path):
    _, seq = sequence
    assert main(["render", str(run), str(seq / "poses.txt"), str(tmp_path)]) == 0
    assert len(list((tmp_path / "color").glob("*.png"))) == 3


def test_eval(run, sequence):
    _, seq = sequence
    assert main(["eval", str(run), str(seq), "--samples", "2000", "--every", "2"]) == 0
    text = (run / "metrics.txt").read_text()
    keys = [line.split(" = ")[0] for line in text.splitlines()]
    assert {"depth_l1_cm", "mesh_depth_l1_cm", "psnr_db", "ssim", "accuracy_cm", "completion_cm",
            "completion_ratio"} <= set(keys)
    last = json.loads((run / "run_log.jsonl").read_text().splitlines()[-1])
    assert last["type"] == "metrics"


def test_missing_sequence_exit_1(tmp_path, capsys):
    assert main(["map", str(tmp_path / "none"), str(tmp_path / "out")]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_exit_1(sequence, tmp_path):
    _, seq = sequence
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nbogus = 1\n")
    assert main(["map", str(seq), str(tmp_path / "o"), "--config", str(cfg)]) == 1


def test_render_without_intrinsics_exit_1(tmp_path):
    from hybridmap.checkpoint import save_checkpoint
    from hybridmap.network import HybridModel, ModelConfig

    save_checkpoint(tmp_path / "c.bin", HybridModel(ModelConfig(log2_table_size=8)))
    write_poses(tmp_path / "p.txt", [Pose.identity()])
    assert main(["render", str(tmp_path / "c.bin"), str(tmp_path / "p.txt"), str(tmp_path / "r")]) == 1


def test_divergence_exit_2(sequence, tmp_path, capsys):
    _, seq = sequence
    cfg = tmp_path / "wild.ini"
    cfg.write_text("[optimizer]\nlr_vertex_sdf = 1e30\nlr_geo_table = 1e30\nlr_color_table = 1e30\n")
    code = main(["map", str(seq), str(tmp_path / "o"), "--config", str(cfg), "--rays", "64", "--max-iters", "3"])
    assert code == 2
    assert "numerical error" in capsys.readouterr().err
