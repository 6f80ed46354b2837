import json

import numpy as np
import pytest

from tetvr.assets import ImageBuffer, read_image, write_image
from tetvr.cli import main
from tetvr.optim import read_metrics_csv
from tetvr.tetmesh import load_mesh


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    code = main(["bake", "--orbit", "5", "--res", "12x12", "--step", "0.05", "--out",
                 str(d / "ds"), "--png"])
    assert code == 0
    return d / "ds"


def test_make_grid(tmp_path, capsys):
    code, out, _ = run(capsys, "make-grid", "--dims", "4,4,4", "--bbox", "-1,-1,-1,1,1,1",
                       "--out", tmp_path / "m.tet")
    assert code == 0
    assert summary(out)["tets"] == 384
    assert load_mesh(tmp_path / "m.tet").n_tets == 384


def test_make_grid_bad_dims(tmp_path, capsys):
    code, _, err = run(capsys, "make-grid", "--dims", "0,1,1", "--bbox", "0,0,0,1,1,1",
                       "--out", tmp_path / "m.tet")
    assert code == 1 and "error" in err


def test_unknown_flag_and_version(capsys):
    code, _, err = run(capsys, "render", "--bogus")
    assert code == 1
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "tetvr" in capsys.readouterr().out


def test_render_missing_mesh_names_path(tmp_path, capsys, dataset):
    missing = tmp_path / "nowhere.tet"
    code, _, err = run(capsys, "render", "--mesh", missing, "--poses",
                       dataset / "transforms.json", "--out", tmp_path / "r")
    assert code == 1
    assert "nowhere.tet" in err


def test_bake_outputs(dataset):
    meta = json.loads((dataset / "transforms.json").read_text())
    assert len(meta["frames"]) == 5
    img = read_image(dataset / "r_0.pfm")
    assert img.data.shape == (12, 12, 4)
    assert (dataset / "r_0.png").is_file()


def test_eval_prints_psnr(tmp_path, capsys):
    a = ImageBuffer(np.zeros((4, 4, 4)))
    b = ImageBuffer(np.zeros((4, 4, 4)))
    b.data[..., :3] = 0.1
    write_image(tmp_path / "a.pfm", a)
    write_image(tmp_path / "b.pfm", b)
    code, out, _ = run(capsys, "eval", "--a", tmp_path / "a.pfm", "--b", tmp_path / "b.pfm")
    assert code == 0 and "PSNR 20.0000 dB" in out
    assert summary(out)["psnr"] == pytest.approx(20.0)


def test_zero_epoch_round_trip(tmp_path, capsys, dataset):
    run(capsys, "make-grid", "--dims", "3,3,3", "--bbox", "-1,-1,-1,1,1,1", "--out",
        tmp_path / "m.tet")
    poses = dataset / "transforms.json"
    code, _, _ = run(capsys, "render", "--mesh", tmp_path / "m.tet", "--poses", poses,
                     "--out", tmp_path / "r0", "--dump-fragments", tmp_path / "frags.txt")
    assert code == 0
    assert " : (" in (tmp_path / "frags.txt").read_text()
    code, out, _ = run(capsys, "optimize", "--data", dataset, "--mesh", tmp_path / "m.tet",
                       "--epochs", "0", "--out", tmp_path / "opt", "--report", "no")
    assert code == 0 and summary(out)["epochs"] == 0
    assert read_metrics_csv(tmp_path / "opt" / "metrics.csv") == []
    run(capsys, "render", "--mesh", tmp_path / "opt" / "mesh.tet", "--poses", poses, "--out",
        tmp_path / "r1")
    for k in range(5):
        a = read_image(tmp_path / "r0" / f"r_{k}.pfm")
        b = read_image(tmp_path / "r1" / f"r_{k}.pfm")
        assert a == b


def _optimize(capsys, tmp_path, dataset, name, extra=()):
    cfg = tmp_path / f"{name}.cfg"
    cfg.write_text(f"data = {dataset}\ngrid = 3,3,3\nschedule = color,joint\n"
                   "lr_position = 1e-4\nnsub = 4\nholdout = 0.2\nseed = 3\n")
    return run(capsys, "optimize", "--config", cfg, "--out", tmp_path / name, *extra)


def test_optimize_outputs_and_determinism(tmp_path, capsys, dataset):
    code, out, _ = _optimize(capsys, tmp_path, dataset, "a",
                             ["--save-grads", tmp_path / "g.npz"])
    assert code == 0
    s = summary(out)
    assert s["epochs"] == 2 and np.isfinite(s["final_psnr"])
    for rel in ("mesh.tet", "metrics.csv", "checkpoints/epoch_001.tet",
                "checkpoints/epoch_002.tet", "preview/view_0.png", "report/metrics.png",
                "report/compare_0.png"):
        assert (tmp_path / "a" / rel).is_file(), rel
    code, _, _ = run(capsys, "--threads", "2", "optimize", "--config", tmp_path / "a.cfg",
                     "--out", tmp_path / "b", "--report", "no")
    assert code == 0
    ma = read_metrics_csv(tmp_path / "a" / "metrics.csv")
    mb = read_metrics_csv(tmp_path / "b" / "metrics.csv")
    strip = [{k: v for k, v in r.items() if k != "seconds"} for r in ma]
    assert strip == [{k: v for k, v in r.items() if k != "seconds"} for r in mb]

    code, out, _ = run(capsys, "subdivide", "--mesh", tmp_path / "a" / "mesh.tet", "--grads",
                       tmp_path / "g.npz", "--fraction", "0.1", "--out", tmp_path / "m2.tet",
                       "--dump-csp", tmp_path / "csp.txt")
    assert code == 0
    s = summary(out)
    assert s["tets_after"] > s["tets_before"]
    assert (tmp_path / "csp.txt").read_text().startswith("prism 0")


def test_optimize_unknown_key(tmp_path, capsys, dataset):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(f"data = {dataset}\nout = {tmp_path / 'x'}\nlearning_speed = 3\n")
    code, _, err = run(capsys, "optimize", "--config", cfg)
    assert code == 1 and "learning_speed" in err


def test_grad_check_command(capsys):
    code, out, _ = run(capsys, "grad-check", "--seed", "1", "--limit", "8")
    assert code == 0
    assert summary(out)["passed"] is True
    assert "position" in out
