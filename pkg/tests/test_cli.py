import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from iisan import checkpoint, cli, data
from iisan.config import load_config
from iisan.pipeline import build_run

SMALL = ["data.num_users=40", "data.num_items=30", "training.batch_size=8"]


def _args(tmp_path, *extra):
    return ["--out-dir", str(tmp_path / "run"), "--dataset", str(tmp_path / "d.iisd"),
            *sum((["--set", s] for s in SMALL), []), *extra]


def _run(cmd, tmp_path, *extra):
    return cli.main([cmd, *_args(tmp_path, *extra)])


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture
def dataset(tmp_path):
    assert _run("gen-data", tmp_path) == 0
    return tmp_path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_cached_pipeline_end_to_end(dataset, capsys):
    tmp = dataset
    assert _run("build-cache", tmp) == 0
    assert (tmp / "run" / "hidden_states.dphs").exists()
    assert _run("train", tmp, "--method", "iisan_cached", "--epochs", "2", "-q") == 0
    epochs = _rows(tmp / "run" / "epochs.csv")
    assert [r["epoch"] for r in epochs] == ["0", "1"]
    assert list(epochs[0]) == cli.EPOCH_HEADER
    assert _run("eval", tmp, "--method", "iisan_cached", "--set", "training.epochs=2") == 0
    report = _rows(tmp / "run" / "eval.csv")
    assert [r["method"] for r in report] == ["iisan_cached", "iisan_cached", "popularity"]
    assert {r["config_digest"] for r in report} == {epochs[0]["config_digest"]}
    for r in report:
        assert 0 <= float(r["NDCG@10"]) <= float(r["HR@10"]) <= 1


def test_train_is_reproducible(dataset):
    tmp = dataset
    blobs = []
    for _ in range(2):
        assert _run("train", tmp, "--method", "lora", "--epochs", "1", "-q") == 0
        blobs.append((tmp / "run" / cli.CHECKPOINT_NAME).read_bytes())
        losses = [r["loss"] for r in _rows(tmp / "run" / "epochs.csv")]
    assert blobs[0] == blobs[1] and len(losses) == 1


def test_zero_epochs_saves_the_initial_model(dataset):
    tmp = dataset
    assert _run("train", tmp, "--method", "adapter", "--epochs", "0", "-q") == 0
    _, arrays = checkpoint.load(tmp / "run" / cli.CHECKPOINT_NAME)
    cfg = load_config(None, SMALL + ["method.method=adapter", "training.epochs=0"])
    run = build_run(cfg.method, cfg.encoders, cfg.seq_encoder, cfg.training,
                    items=data.load(tmp / "d.iisd"))
    for name, t in run.method.params.items():
        np.testing.assert_array_equal(arrays[name], t.data)


def test_eval_rejects_checkpoint_from_other_config(dataset, capsys):
    tmp = dataset
    assert _run("train", tmp, "--epochs", "1", "-q") == 0
    assert _run("eval", tmp, "--set", "training.epochs=2") == 2
    assert _error(capsys)["error"] == "ConfigError"


def test_profile_writes_accounting_identity(dataset):
    tmp = dataset
    assert _run("profile", tmp, "--method", "bitfit", "--epochs-timed", "3", "-q") == 0
    (row,) = _rows(tmp / "run" / "profile.csv")
    parts = sum(int(row[k]) for k in ("weights_bytes", "grad_bytes", "optimizer_bytes", "activation_bytes"))
    assert parts == int(row["mem_bytes"])
    assert int(row["optimizer_bytes"]) == 2 * int(row["grad_bytes"]) == 16 * int(row["params"])


def test_exit_codes(dataset, capsys):
    tmp = dataset
    assert _run("train", tmp, "--set", "training.lr=-1") == 2
    err = _error(capsys)
    assert err == {"error": "ConfigError", "exit_code": 2, "message": err["message"]}
    assert cli.main(["train", "--dataset", str(tmp / "nope.iisd"), "--out-dir", str(tmp)]) == 3
    assert _error(capsys)["exit_code"] == 3
    # an embedded method cannot consume cached hidden states
    assert _run("build-cache", tmp) == 0
    code = _run("train", tmp, "--method", "adapter", "--cache", str(tmp / "run" / "hidden_states.dphs"))
    assert code == 4 and _error(capsys)["error"] == "CacheNotApplicableError"
    # cache built for another backbone seed
    code = _run("train", tmp, "--method", "iisan_cached", "--set", "backbone.seed=9")
    assert code == 4 and _error(capsys)["error"] == "ConfigDriftError"


def test_tpme_command(tmp_path, capsys):
    rows = [("fft", 443, 195e6, 46.76e9), ("adapter", 354, 5e6, 37.82e9), ("lora", 378, 0.8e6, 39.07e9),
            ("bitfit", 403, 0.4e6, 36.97e9),
            ("iisan", 179, 4e6, 8.32e9), ("iisan_cached", 22, 4e6, 3.11e9)]
    src = tmp_path / "samples.csv"
    src.write_text("method,t_seconds,params,mem_bytes\n" + "".join(f"{m},{t},{p},{g}\n" for m, t, p, g in rows))
    out = tmp_path / "tpme.csv"
    assert cli.main(["tpme", str(src), "--out", str(out)]) == 0
    got = {r["method"]: float(r["tpme_percent"]) for r in _rows(out)}
    assert got["fft"] == 100.0 and got["iisan_cached"] == pytest.approx(0.185, abs=0.006)
    assert cli.main(["tpme", str(src), "--out", str(out), "--alpha", "0.5", "0.5", "0.5"]) == 2
    assert cli.main(["tpme", str(tmp_path / "none.csv"), "--out", str(out)]) == 2
    capsys.readouterr()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "iisan.cli", "tpme", str(tmp_path / "x.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["exit_code"] == 2
