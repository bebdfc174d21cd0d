import csv
import json

import numpy as np
import pytest

from pfskd.cli import run
from pfskd.models import SegNetSpec
from pfskd.tensor import save_tensor

TINY_T = SegNetSpec(stem=[(8, 2), (8, 2)], body=[(8, 2)], pfs_variant="c_pfs").to_json()
TINY_S = SegNetSpec(stem=[(4, 2), (8, 2)], body=[(8, 2)], pfs_variant="s_pfs").to_json()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_cfg = root / "data.json"
    data_cfg.write_text(json.dumps({"size": 16, "n_train": 8, "n_val": 4}))
    assert run(["gen-data", "--config", str(data_cfg), "--out", str(root / "data")]) == 0
    t_cfg = root / "teacher.json"
    t_cfg.write_text(json.dumps({"batch_size": 4, "net": TINY_T, "epochs": 5}))
    assert run(["train-teacher", "--config", str(t_cfg), "--dataset", str(root / "data"),
                "--epochs", "1", "--out", str(root / "teacher")]) == 0
    return root


def test_gen_data_defaults(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 500, "val": 100}
    assert len(list((tmp_path / "train").glob("*.img.pfst"))) == 500


def test_flags_override_json(pipeline):
    cfg = json.loads((pipeline / "teacher" / "config.json").read_text())
    assert cfg["epochs"] == 1 and cfg["batch_size"] == 4


def test_distill_pipeline(pipeline, tmp_path):
    s_cfg = tmp_path / "s.json"
    s_cfg.write_text(json.dumps({"batch_size": 4, "net": TINY_S, "loss": {"lam": 5.0}}))
    out = tmp_path / "student"
    code = run(["distill", "--config", str(s_cfg), "--teacher", str(pipeline / "teacher" / "model.pfck"),
                "--dataset", str(pipeline / "data"), "--mode", "pfs+gap", "--epochs", "1", "--lambda", "20",
                "--mu", "0.5", "--seed", "3", "--out", str(out)])
    assert code == 0
    for name in ("model.pfck", "steps.csv", "epochs.csv", "config.json"):
        assert (out / name).exists()
    cfg = json.loads((out / "config.json").read_text())
    assert (cfg["loss"]["lam"], cfg["loss"]["mu"], cfg["seed"], cfg["mode"]) == (20.0, 0.5, 3, "pfs+gap")
    first = (out / "steps.csv").read_bytes()
    assert run(["distill", "--config", str(s_cfg), "--teacher", str(pipeline / "teacher" / "model.pfck"),
                "--dataset", str(pipeline / "data"), "--mode", "pfs+gap", "--epochs", "1", "--lambda", "20",
                "--mu", "0.5", "--seed", "3", "--out", str(out)]) == 0
    assert (out / "steps.csv").read_bytes() == first


def test_eval_report(pipeline, tmp_path, capsys):
    code = run(["eval", "--checkpoint", str(pipeline / "teacher" / "model.pfck"),
                "--dataset", str(pipeline / "data"), "--out", str(tmp_path)])
    assert code == 0
    assert "mIoU" in capsys.readouterr().out
    rows = list(csv.reader((tmp_path / "report.csv").open()))
    assert rows[0] == ["metric", "value"] and rows[1][0] == "iou_background"


def test_pfs_dump(pipeline, tmp_path):
    ck = str(pipeline / "teacher" / "model.pfck")
    code = run(["pfs-dump", "--checkpoint", ck, "--dataset", str(pipeline / "data"), "--index", "1",
                "--pixel", "4,5", "--pixel", "10,2", "--out", str(tmp_path)])
    assert code == 0
    assert len(list(tmp_path.glob("*.pgm"))) == 2
    img = tmp_path / "img.pfst"
    save_tensor(np.zeros((3, 16, 16), np.float32), img)
    assert run(["pfs-dump", "--checkpoint", ck, "--image", str(img), "--pixel", "0,0",
                "--source", "feature", "--out", str(tmp_path / "f")]) == 0


def test_pfs_dump_bounds_error(pipeline, tmp_path, capsys):
    code = run(["pfs-dump", "--checkpoint", str(pipeline / "teacher" / "model.pfck"),
                "--dataset", str(pipeline / "data"), "--index", "0", "--pixel=-1,0", "--out", str(tmp_path)])
    assert code == 1
    assert "outside" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochz": 3}))
    assert run(["train-teacher", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "epochz" in capsys.readouterr().err
    cfg.write_text(json.dumps({"sizee": 3}))
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "sizee" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert run(["bogus"]) == 1
    assert run(["train-teacher", "--out", str(tmp_path)]) == 1
    assert "dataset" in capsys.readouterr().err
    assert run(["eval", "--checkpoint", str(tmp_path / "missing.pfck"), "--dataset", str(tmp_path)]) == 1
    assert run(["distill", "--teacher", str(tmp_path / "none.pfck"), "--dataset", str(tmp_path),
                "--mode", "wat", "--out", str(tmp_path)]) == 1


def test_oracle_check(tmp_path):
    assert run(["oracle-check", "--instances", "3", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "oracles.csv").open()))
    assert rows and all(r["pass"] == "1" for r in rows)


def test_gradcheck(tmp_path):
    assert run(["gradcheck", "--rounds", "1", "--no-network", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "gradcheck.csv").open()))
    assert rows and all(r["pass"] == "true" for r in rows)
