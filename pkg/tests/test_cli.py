import json

import numpy as np
import pytest

from resnet_pde import config as cfgmod
from resnet_pde.cli import run
from resnet_pde.config import ConfigError
from resnet_pde.io import (file_hash, read_dataset, read_field, write_dataset, write_field)
from resnet_pde.point_cloud import gen_dataset


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


# -- config ------------------------------------------------------------------

def test_validate_fills_defaults():
    cfg = cfgmod.validate("train", {"problem": "hj", "velocity": {"variant": "rbf"}})
    assert cfg["train"]["lr"] == 0.01 and cfg["dataset"]["kind"] == "two_moons"
    assert cfg["pde"]["dissipation"] == 1.0


@pytest.mark.parametrize("bad, key", [
    ({"problem": "hj", "velocity": {"variant": "rbf", "hiden": 3}}, "velocity.hiden"),
    ({"velocity": {"variant": "rbf"}}, "problem"),
    ({"problem": "hj"}, "velocity.variant"),
    ({"problem": "hj", "velocity": {"variant": "rbf"}, "train": {"lr": -1}}, "train.lr"),
    ({"problem": "hj", "velocity": {"variant": "cnn"}}, "velocity.variant"),
    ({"problem": "hj", "velocity": {"variant": "rbf"}, "train": {"epochs": 2.5}}, "train.epochs"),
])
def test_validation_names_key(bad, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        cfgmod.validate("train", bad)


def test_overrides():
    cfg = cfgmod.apply_overrides({"train": {"lr": 0.1}}, ["train.lr=0.5", "velocity.variant=mlp"])
    assert cfg == {"train": {"lr": 0.5}, "velocity": {"variant": "mlp"}}
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides({}, ["novalue"])


# -- io ----------------------------------------------------------------------

def test_dataset_roundtrip(tmp_path):
    ds = gen_dataset("two_moons", 30, seed=2)
    ds = ds.with_masks(constraint_mask=np.arange(30) < 5)
    csv_path, json_path = write_dataset(ds, tmp_path / "d.csv")
    back = read_dataset(csv_path)
    np.testing.assert_array_equal(back.cloud.points, ds.cloud.points)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.constraint_mask, ds.constraint_mask)
    assert back.cloud.delta == ds.cloud.delta
    meta = json.loads(open(json_path).read())
    assert {"delta", "kernel", "seed", "volume_mode"} <= set(meta)


def test_field_roundtrip(tmp_path):
    u = np.random.default_rng(0).standard_normal((7, 2))
    write_field(tmp_path / "u.csv", u)
    np.testing.assert_array_equal(read_field(tmp_path / "u.csv"), u)
    write_field(tmp_path / "v.csv", u[:, 0])
    np.testing.assert_array_equal(read_field(tmp_path / "v.csv"), u[:, 0])


# -- commands ----------------------------------------------------------------

def test_gen_circle(tmp_path):
    out = tmp_path / "c.csv"
    assert run(["gen", "circle", "4", "--seed", "1", "-o", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "x0,x1,label,train,constraint" and len(rows) == 5
    manifest = json.loads((tmp_path / "c.manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seed"] == 1
    assert manifest["artifacts"]["dataset"]["sha256"] == file_hash(out)


def test_gen_reproducible_hash(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(["gen", "two_moons", "50", "--seed", "9", "-o", str(a)])
    run(["gen", "two_moons", "50", "--seed", "9", "-o", str(b)])
    assert file_hash(a) == file_hash(b)


def test_gen_bad_path_names_path(tmp_path, capsys):
    bad = tmp_path / "missing" / "x.csv"
    assert run(["gen", "circle", "8", "-o", str(bad)]) == 2
    assert str(bad) in capsys.readouterr().err


def test_train_validation_errors(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {"velocity": {"variant": "rbf"}})
    assert run(["train", "--config", cfg, "-o", str(tmp_path / "r")]) == 1
    assert "'problem'" in capsys.readouterr().err
    cfg = _write(tmp_path / "c2.json", {"problem": "hj", "velocity": {"variant": "rbf"},
                                         "trian": {}})
    assert run(["train", "--config", cfg]) == 1
    assert "'trian'" in capsys.readouterr().err


SMALL = {"problem": "transport", "velocity": {"variant": "resblock", "steps": 2, "hidden": 4},
         "dataset": {"kind": "two_blobs", "n": 40}, "train": {"epochs": 5}}


def test_train_zero_lr_constant_loss(tmp_path):
    cfg = _write(tmp_path / "c.json", SMALL)
    out = tmp_path / "r"
    assert run(["train", "--config", cfg, "--set", "train.lr=0", "-o", str(out)]) == 0
    rows = (out / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,accuracy"
    assert len({r.split(",")[1] for r in rows[1:]}) == 1
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["lr"] == 0
    ckpt = json.loads((out / "checkpoint.json").read_text())
    assert ckpt["velocity"]["index_map"][0]["name"] == "W1"


def test_train_rerun_from_manifest_reproduces(tmp_path):
    cfg = _write(tmp_path / "c.json", SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train", "--config", cfg, "-o", str(a)]) == 0
    assert run(["train", "--config", str(a / "run.json"), "-o", str(b)]) == 0
    assert file_hash(a / "loss.csv") == file_hash(b / "loss.csv")
    assert file_hash(a / "checkpoint.json") == file_hash(b / "checkpoint.json")
    manifest = json.loads((a / "run.json").read_text())
    assert manifest["config"]["train"]["epochs"] == 5 and "version" in manifest


@pytest.mark.parametrize("problem, variant", [("hj", "linear"), ("transport", "mlp"),
                                              ("viscous_hj", "rbf")])
def test_train_field_problems(tmp_path, problem, variant):
    cfg = dict(SMALL, problem=problem, velocity={"variant": variant, "steps": 2, "hidden": 3},
               pde={"dissipation": 0.01})
    cfg = _write(tmp_path / "c.json", cfg)
    assert run(["train", "--config", cfg, "-o", str(tmp_path / "r")]) == 0
    assert len((tmp_path / "r" / "loss.csv").read_text().splitlines()) == 6


def test_train_from_generated_dataset(tmp_path):
    data = tmp_path / "d.csv"
    run(["gen", "two_blobs", "30", "-o", str(data)])
    cfg = _write(tmp_path / "c.json", dict(SMALL, dataset={"path": str(data)}))
    assert run(["train", "--config", cfg, "-o", str(tmp_path / "r")]) == 0


def test_solve_commands(tmp_path):
    out = tmp_path / "s"
    args = ["solve", "--set", "problem=viscous_hj", "--set", "velocity.zero=true",
            "--set", "velocity.variant=linear", "--set", "dataset.kind=two_blobs",
            "--set", "dataset.n=60", "-o", str(out)]
    assert run(args) == 0
    assert read_field(out / "field.csv").shape == (60,)
    assert (out / "solve_diagnostics.json").exists() and (out / "run.json").exists()
    assert run(["solve", "--set", "problem=wnll", "--set", "dataset.kind=two_blobs",
                "--set", "dataset.n=60", "-o", str(tmp_path / "w")]) == 0
    assert read_field(tmp_path / "w" / "field.csv").shape == (60, 2)


def test_convergence_table(tmp_path):
    out = tmp_path / "conv.csv"
    assert run(["convergence", "circle", "--sizes", "100", "400", "1600", "-o", str(out)]) == 0
    rows = [r.split(",") for r in out.read_text().splitlines()]
    assert rows[0] == ["n", "delta", "l2_error", "rate"]
    errs = [float(r[2]) for r in rows[1:]]
    assert errs[0] > errs[1] > errs[2]
    assert rows[1][3] == "" and float(rows[2][3]) > 0


def test_convergence_constant_and_single_size(tmp_path):
    out = tmp_path / "c.csv"
    assert run(["convergence", "sphere", "--sizes", "200", "--set", "field=constant",
                "-o", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 2 and rows[1].endswith(",") and float(rows[1].split(",")[2]) == 0.0


def test_gradcheck_exit_codes(tmp_path):
    base = ["gradcheck", "--set", "instances=2", "--set", 'variants=["linear"]',
            "--set", 'problems=["hj"]']
    ok = tmp_path / "ok.json"
    assert run(base + ["-o", str(ok)]) == 0
    report = json.loads(ok.read_text())
    assert report["tol"] == 1e-4 and report["passed"]
    bad = tmp_path / "bad.json"
    assert run(base + ["--corrupt-gradient", "-o", str(bad)]) == 1
    assert not json.loads(bad.read_text())["passed"]
