import json
import shutil
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from tablegraph.cli import main
from tablegraph.evaluate import REPORT_SCHEMA
from tablegraph.model import TableGraphModel, load_model

SMALL = {"image_h": 128, "image_w": 128, "n_rows": [2, 3], "n_cols": [2, 3], "perspective_jitter": 4.0}


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "gen.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def data(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("data") / "d"
    assert main(["generate", "--out", str(out), "--count", "8", "--category", "mixed",
                 "--seed", "5", "--config", str(small_cfg)]) == 0
    return out


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run_train(data, out, *extra):
    return main(["train", "--data", str(data), "--out", str(out), "--model", "dgcnn", "--steps", "3",
                 "--s", "4", "--seed", "1", *extra])


@pytest.mark.parametrize("sub", [None, "generate", "train", "evaluate", "predict", "visualize"])
def test_help(sub):
    argv = [sys.executable, "-m", "tablegraph.cli"] + ([sub] if sub else []) + ["--help"]
    res = subprocess.run(argv, capture_output=True, text=True)
    assert res.returncode == 0 and "usage" in res.stdout


def test_generate_is_byte_identical(tmp_path, small_cfg, capsys):
    for name in ("a", "b"):
        assert main(["generate", "--out", str(tmp_path / name), "--count", "10", "--category", "1",
                     "--seed", "7", "--config", str(small_cfg)]) == 0
    assert "cat1=10" in capsys.readouterr().out
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_generate_mixed_has_all_categories(data):
    cats = {json.loads(line)["category"] for line in (data / "manifest.jsonl").read_text().splitlines()}
    assert cats == {1, 2, 3, 4}


def test_generate_invalid_category(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["generate", "--out", str(tmp_path), "--count", "1", "--category", "5"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_generate_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"colour": "red"}))
    assert main(["generate", "--out", str(tmp_path / "o"), "--count", "1", "--config", str(cfg)]) == 2


def test_train_missing_manifest(tmp_path):
    assert run_train(tmp_path / "nothing", tmp_path / "run") == 3


def test_train_unknown_config_key(tmp_path, data):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"momentum": 0.9}))
    assert run_train(data, tmp_path / "run", "--config", str(cfg)) == 2


def test_train_config_file_and_flag_override(tmp_path, data):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"lr": 0.5, "s": 2, "seed": 9}))
    assert run_train(data, tmp_path / "run", "--config", str(cfg)) == 0
    saved = json.loads((tmp_path / "run" / "train.json").read_text())
    assert saved["lr"] == 0.5 and saved["s"] == 4 and saved["seed"] == 1


def test_train_zero_steps_is_initialization(tmp_path, data):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "z"), "--model", "fcnn",
                 "--steps", "0", "--seed", "2"]) == 0
    model, _ = load_model(tmp_path / "z" / "checkpoint.bin")
    fresh = TableGraphModel(model.cfg)
    for name, t in fresh.params.items():
        assert model.params[name].data.tobytes() == t.data.tobytes()


def test_train_models_differ(tmp_path, data):
    assert run_train(data, tmp_path / "dg") == 0
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "fc"), "--model", "fcnn",
                 "--steps", "3", "--s", "4", "--seed", "1"]) == 0
    assert (tmp_path / "dg" / "checkpoint.bin").read_bytes() != (tmp_path / "fc" / "checkpoint.bin").read_bytes()


def test_train_nonfinite_exit(tmp_path, data):
    with np.errstate(all="ignore"):
        code = run_train(data, tmp_path / "nan", "--lr", "1e308", "--steps", "30")
    assert code == 4


def test_train_evaluate_rerun_identical(tmp_path, data, capsys):
    run = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        if run.exists():
            shutil.rmtree(run)
        assert run_train(data, run, "--no-timestamps", "--eval-every", "3") == 0
        assert main(["evaluate", "--data", str(data), "--checkpoint", str(run / "checkpoint.bin"),
                     "--out", str(run / "report.json"), "--csv", str(run / "r.csv")]) == 0
        snapshots.append(tree_bytes(run))
    out = capsys.readouterr().out
    assert "eval (train subset" in out and "Perfect matching" in out
    assert snapshots[0] == snapshots[1]
    assert set(snapshots[0]) == {"checkpoint.bin", "model.json", "train.json", "runlog.jsonl", "report.json", "r.csv"}
    jsonschema.validate(json.loads((run / "report.json").read_text()), REPORT_SCHEMA)


def test_runlog_timestamps_only_difference(tmp_path, data):
    for name in ("a", "b"):
        assert run_train(data, tmp_path / name) == 0

    def strip(p):
        return [{k: v for k, v in json.loads(x).items() if k != "time"} for x in p.read_text().splitlines()]

    assert strip(tmp_path / "a" / "runlog.jsonl") == strip(tmp_path / "b" / "runlog.jsonl")
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_evaluate_oracle(tmp_path, data, capsys):
    assert main(["evaluate", "--data", str(data), "--oracle", "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    for block in report["categories"].values():
        assert block["perfect_matching"] == 100
        assert all(block[k] == {"tpr": 100.0, "fpr": 0.0} for k in ("cells", "rows", "cols"))
    out = capsys.readouterr().out
    assert "True positive rate" in out and "cat1=2 cat2=2 cat3=2 cat4=2" in out


def test_evaluate_needs_checkpoint(data):
    assert main(["evaluate", "--data", str(data)]) == 2


def test_evaluate_bad_checkpoint(tmp_path, data):
    (tmp_path / "model.json").write_text(json.dumps({"kind": "fcnn"}))
    (tmp_path / "checkpoint.bin").write_bytes(b"nope")
    assert main(["evaluate", "--data", str(data), "--checkpoint", str(tmp_path / "checkpoint.bin")]) == 3


def test_predict_and_visualize(tmp_path, data, capsys):
    assert run_train(data, tmp_path / "run") == 0
    ckpt = str(tmp_path / "run" / "checkpoint.bin")
    assert main(["predict", "--sample", str(data / "000000.json"), "--checkpoint", ckpt,
                 "--out", str(tmp_path / "p.json")]) == 0
    pred = json.loads((tmp_path / "p.json").read_text())
    assert set(pred) == {"cells", "rows", "cols"}
    members = sorted(m for c in pred["cells"] for m in c)
    assert members == list(range(len(members)))
    assert main(["visualize", "--sample", str(data / "000000"), "--out", str(tmp_path / "viz" / "s")]) == 0
    assert main(["visualize", "--sample", str(data / "000000"), "--checkpoint", ckpt,
                 "--out", str(tmp_path / "viz" / "p")]) == 0
    for kind in ("cells", "rows", "cols"):
        assert (tmp_path / "viz" / f"s_{kind}.png").exists() and (tmp_path / "viz" / f"p_{kind}.png").exists()
    assert main(["visualize", "--sample", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == 3
