import json

import numpy as np
import pytest

from elastica.cli import main
from elastica.core import read_bundle, read_trajectory


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    code = main(
        [
            "gen", "--objects", "3", "--samples", "1", "--out", str(out),
            "--seed", "11", "--test-objects", "1", "--gaussians", "64",
            "--anchors", "24", "--res", "24", "--jobs", "1",
        ]
    )
    assert code == 0
    return out


def test_gen_counts_and_manifest(small_dataset):
    manifest = json.loads((small_dataset / "manifest.json").read_text())
    assert len(manifest) == 3
    splits = {r["split"] for r in manifest}
    assert splits == {"train", "test"}
    for row in manifest:
        assert (small_dataset / row["path"]).exists()


def test_gen_rerun_is_byte_identical(small_dataset, tmp_path):
    out2 = tmp_path / "again"
    code = main(
        [
            "gen", "--objects", "3", "--samples", "1", "--out", str(out2),
            "--seed", "11", "--test-objects", "1", "--gaussians", "64",
            "--anchors", "24", "--res", "24", "--jobs", "1",
        ]
    )
    assert code == 0
    assert (small_dataset / "manifest.json").read_bytes() == (out2 / "manifest.json").read_bytes()
    manifest = json.loads((out2 / "manifest.json").read_text())
    for row in manifest:
        assert (small_dataset / row["path"]).read_bytes() == (out2 / row["path"]).read_bytes()


def test_simulate_then_render_smoke(small_dataset, tmp_path):
    manifest = json.loads((small_dataset / "manifest.json").read_text())
    bundle_path = small_dataset / manifest[0]["path"]
    traj_path = tmp_path / "traj.json"
    assert main(["simulate", "--bundle", str(bundle_path), "--frames", "8", "--out", str(traj_path)]) == 0
    traj = read_trajectory(traj_path)
    assert traj.shape[0] == 8

    frames_dir = tmp_path / "frames"
    assert main(
        ["render", "--bundle", str(bundle_path), "--traj", str(traj_path),
         "--view", "+x", "--out", str(frames_dir), "--res", "32"]
    ) == 0
    pngs = sorted(frames_dir.glob("*.png"))
    assert len(pngs) == 8
    from elastica.renderer import read_png

    for p in pngs:
        img = read_png(p)
        assert img.std() > 0  # never pure background


def test_simulate_binary_format(small_dataset, tmp_path):
    manifest = json.loads((small_dataset / "manifest.json").read_text())
    bundle_path = small_dataset / manifest[0]["path"]
    out = tmp_path / "t.smtj"
    assert main(["simulate", "--bundle", str(bundle_path), "--frames", "5", "--out", str(out)]) == 0
    assert out.read_bytes()[:4] == b"SMTJ"
    assert read_trajectory(out).shape[0] == 5


def test_identify_self_consistency_and_determinism(small_dataset, tmp_path):
    manifest = json.loads((small_dataset / "manifest.json").read_text())
    bundle_path = small_dataset / manifest[0]["path"]
    bundle = read_bundle(bundle_path)

    traj_path = tmp_path / "obs.json"
    from elastica.core import write_trajectory_json

    write_trajectory_json(traj_path, bundle.trajectory[:20], 30.0)

    out1 = tmp_path / "p1.json"
    out2 = tmp_path / "p2.json"
    grads = tmp_path / "grads.json"
    args = [
        "identify", "--bundle", str(bundle_path), "--observed", str(traj_path),
        "--iters", "30", "--seed", "3", "--loss", "traj",
    ]
    assert main(args + ["--out", str(out1), "--dump-grads", str(grads)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert (tmp_path / "p1.loss.csv").exists()
    g = json.loads(grads.read_text())
    assert set(g) >= {"d_mass", "d_stiffness", "d_damping", "d_friction"}

    params = json.loads(out1.read_text())
    assert set(params) == {"mass", "stiffness", "damping", "friction", "shared"}


def test_train_predict_eval_pipeline(small_dataset, tmp_path):
    model_path = tmp_path / "model.json"
    code = main(
        ["train", "--manifest", str(small_dataset / "manifest.json"),
         "--epochs", "2", "--batch", "2", "--seed", "0", "--out", str(model_path)]
    )
    assert code == 0
    assert model_path.exists()
    loss_csv = (tmp_path / "model.loss.csv").read_text().splitlines()
    assert loss_csv[0] == "epoch,loss"
    assert len(loss_csv) == 3

    manifest = json.loads((small_dataset / "manifest.json").read_text())
    test_row = next(r for r in manifest if r["split"] == "test")
    bundle = read_bundle(small_dataset / test_row["path"])
    obs_path = tmp_path / "obs.json"
    from elastica.core import write_trajectory_json

    write_trajectory_json(obs_path, bundle.trajectory[:20], 30.0)
    params_out = tmp_path / "pred.json"
    assert main(["predict", "--model", str(model_path), "--observed", str(obs_path),
                 "--out", str(params_out)]) == 0
    pred = json.loads(params_out.read_text())
    assert 0.2 <= pred["mass"] <= 6.0

    report_path = tmp_path / "report.json"
    code = main(
        ["eval", "--manifest", str(small_dataset / "manifest.json"),
         "--model", str(model_path), "--out", str(report_path),
         "--res", "24", "--jobs", "1"]
    )
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["n_scenes"] == 1
    assert report["conventions"]["lpips"] is None
    csv_lines = (tmp_path / "report.csv").read_text().splitlines()
    assert csv_lines[0].startswith("object_id,sample,split,psnr,ssim,cd,emd")
    assert len(csv_lines) == 3  # header + recon + future rows


def test_eval_mean_baseline_flag(small_dataset, tmp_path):
    report_path = tmp_path / "mb.json"
    code = main(
        ["eval", "--manifest", str(small_dataset / "manifest.json"),
         "--mean-baseline", "--out", str(report_path), "--res", "24", "--jobs", "1"]
    )
    assert code == 0
    assert json.loads(report_path.read_text())["n_scenes"] == 1


def test_eval_ground_truth_is_near_perfect(small_dataset, tmp_path):
    report_path = tmp_path / "gt.json"
    assert main(
        ["eval", "--manifest", str(small_dataset / "manifest.json"),
         "--ground-truth", "--out", str(report_path), "--res", "24", "--jobs", "1"]
    ) == 0
    report = json.loads(report_path.read_text())
    assert report["future"]["cd"]["median"] < 1e-9
    assert report["future"]["psnr"]["median"] == 99.0


def test_usage_errors_exit_1(capsys):
    assert main(["identify", "--bundle"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["code"] == "usage"
    assert main(["frobnicate"]) == 1
    assert main(["simulate", "--bundle", "x.json", "--frames", "3",
                 "--out", "y", "--unknown-flag"]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["simulate", "--bundle", str(missing), "--frames", "3",
                 "--out", str(tmp_path / "t.json")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["code"] == "data"


def test_divergence_exits_3(tmp_path, capsys):
    import sys
    sys.path.insert(0, str((__import__("pathlib").Path(__file__).parent)))
    from conftest import make_bundle
    from elastica.core import (
        PhysicalAttributes,
        SceneBundle,
        SimConfig,
        SpringMassState,
        write_bundle,
    )

    base = make_bundle(
        np.array([[0.0, 5, 0], [0.4, 5, 0]]),
        k_neighbors=1,
        attrs=PhysicalAttributes(1e-9, 1e12, 0.0, 0.0),
        config=SimConfig(dt=1.0, substeps_per_frame=1, frame_rate=1.0),
    )
    b = SceneBundle(
        object_id=base.object_id,
        gaussians=base.gaussians,
        anchors=SpringMassState(np.array([[0.0, 5, 0], [0.9, 5, 0]]), np.zeros((2, 3))),
        topology=base.topology,
        binding=base.binding,
        attributes=base.attributes,
        config=base.config,
    )
    path = tmp_path / "explosive.json"
    write_bundle(b, path)
    code = main(["simulate", "--bundle", str(path), "--frames", "50",
                 "--out", str(tmp_path / "t.json")])
    assert code == 3
    err = json.loads(capsys.readouterr().err)
    assert err["code"] == "divergence"
    assert "step_index" in err["context"]


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for sub in ("gen", "simulate", "render", "identify", "train", "predict", "eval", "serve"):
        assert sub in out
