"""Command-line interface: subcommands, config resolution and exit codes."""

import csv
import json

import numpy as np
import pytest

from hmsm import cli
from hmsm.data import load_batch
from hmsm.datagen import RegimeGraph
from hmsm.exceptions import NumericFailure
from hmsm.model import load as load_model


# smoke-scale fits can leave a regime without held-out windows
pytestmark = pytest.mark.filterwarnings("ignore:no held-out window:RuntimeWarning")


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("MSM_OUT_ROOT", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _gen(root, name, seed=1, N=30, *extra):
    rc = cli.main(["generate", "--d", "3", "--M", "1", "--K", "2", "--N", str(N), "--T", "30", "--max-parents", "2",
                   "--hidden-per-output", "4", "--seed", str(seed), "--out", f"{name}.msmseq", *extra])
    assert rc == 0
    return root / f"{name}.msmseq"


def _train(data, out="est.msm.json", *extra):
    return cli.main(["train", "--data", str(data), "--K", "2", "--M", "1", "--hidden-per-output", "4",
                     "--max-epochs", "3", "--batch-size", "15", "--linear-restarts", "1", "--out", out, *extra])


def test_generate_writes_dataset_truth_and_graph(root):
    data = _gen(root, "train")
    batch = load_batch(data)
    assert (batch.N, batch.T, batch.d) == (30, 30, 3)
    truth = load_model(root / "train.truth.msm.json")
    assert truth.K == 2 and truth.spec.M == 1
    assert (root / "train.graph.json").exists()


def test_generate_is_seed_deterministic(root):
    a, b = _gen(root, "a", seed=7), _gen(root, "b", seed=7)
    assert np.array_equal(load_batch(a).X, load_batch(b).X)


def test_data_seed_keeps_truth_and_changes_sequences(root):
    a = _gen(root, "a")
    b = _gen(root, "b", 1, 30, "--data-seed", "5")
    c = _gen(root, "c", 1, 30, "--data-seed", "1")
    assert (root / "a.truth.msm.json").read_text() == (root / "b.truth.msm.json").read_text()
    assert not np.allclose(load_batch(a).X, load_batch(b).X)
    assert np.array_equal(load_batch(a).X, load_batch(c).X)


def test_train_decode_eval_round(root):
    data = _gen(root, "train")
    held = _gen(root, "held", 1, 10, "--data-seed", "2")
    assert _train(data) == 0
    with open(root / "est.msm.json.log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "loglik", "lr"] and len(rows) == 3

    assert cli.main(["decode", "--model", "est.msm.json", "--data", str(held), "--out", "dec.csv"]) == 0
    with open(root / "dec.csv") as fh:
        dec = list(csv.DictReader(fh))
    assert len(dec) == 10 * 30
    p = np.array([[float(r["p0"]), float(r["p1"])] for r in dec])
    assert np.allclose(p.sum(axis=1), 1.0)
    assert all(int(r["state"]) == int(np.argmax(q)) for r, q in zip(dec, p))

    rc = cli.main(["eval", "--model", "est.msm.json", "--data", str(held), "--truth", "train.truth.msm.json",
                   "--graph", "train.graph.json", "--metric", "l2", "--metric", "f1", "--metric", "freq",
                   "--sample-rate", "200", "--tau", "0.05", "--out", "ev"])
    assert rc == 0
    res = json.loads((root / "ev.json").read_text())
    assert res["l2"] >= 0 and 0 <= res["f1"] <= 1 and res["freq_hz"] >= 0
    assert sorted(res["sigma"]) == [0, 1]
    with open(root / "ev.csv") as fh:
        assert {r["metric"] for r in csv.DictReader(fh)} == {"l2", "f1", "freq_hz"}


def test_truth_masked_training(root):
    data = _gen(root, "train")
    assert _train(data, "m.json", "--mask", "truth", "--graph", "train.graph.json") == 0
    est = load_model(root / "m.json")
    graph = RegimeGraph.load(root / "train.graph.json")
    for k, net in enumerate(est.networks):
        assert np.array_equal(net.mask, graph.row_masks(k))
    assert _train(data, "m2.json", "--mask", "truth") == cli.EXIT_CONFIG


def test_print_config_reproduces_run(root, capsys):
    data = _gen(root, "train")
    capsys.readouterr()
    args = ["train", "--data", str(data), "--K", "2", "--M", "1", "--max-epochs", "2", "--out", "x.json"]
    assert cli.main(args + ["--print-config"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["command"] == "train" and resolved["max_epochs"] == 2
    (root / "cfg.json").write_text(json.dumps(resolved))
    assert cli.main(["train", "--config", "cfg.json", "--print-config"]) == 0
    assert json.loads(capsys.readouterr().out) == resolved


def test_flags_override_config(root, capsys):
    (root / "cfg.json").write_text(json.dumps({"data": "d", "K": 2, "M": 1, "out": "o", "max_epochs": 9}))
    assert cli.main(["--config", "cfg.json", "train", "--max-epochs", "4", "--print-config"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["max_epochs"] == 4 and resolved["K"] == 2


def test_config_errors_exit_2(root):
    (root / "bad.json").write_text(json.dumps({"bogus": 1}))
    assert cli.main(["train", "--config", "bad.json"]) == cli.EXIT_CONFIG
    (root / "wrong.json").write_text(json.dumps({"command": "decode"}))
    assert cli.main(["train", "--config", "wrong.json"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--data", "x"]) == cli.EXIT_CONFIG
    assert cli.main(["decode", "--model", "missing.json", "--data", "x", "--out", "y"]) == cli.EXIT_CONFIG
    assert cli.main(["generate", "--out", "g.msmseq"]) == cli.EXIT_CONFIG  # no sparsity given
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--K", "two"])
    assert exc.value.code == 2


def test_numeric_failure_exit_3(root, monkeypatch):
    data = _gen(root, "train")

    def boom(*a, **k):
        raise NumericFailure("non-finite log-likelihood")

    monkeypatch.setattr("hmsm.learning.fit", boom)
    assert _train(data) == cli.EXIT_NUMERIC


def test_preprocess_csv(root):
    rate = 1000.0
    t = np.arange(int(4.5 * rate)) / rate
    sig = np.stack([np.sin(2 * np.pi * 10 * t), np.cos(2 * np.pi * 7 * t)], axis=1)
    with open(root / "rec.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b"])
        w.writerows(sig.tolist())
    rc = cli.main(["preprocess", "--input", "rec.csv", "--rate", "1000", "--target-hz", "200",
                   "--epoch-seconds", "2", "--out", "pre.msmseq"])
    assert rc == 0
    batch = load_batch(root / "pre.msmseq")
    assert (batch.N, batch.T, batch.d) == (2, 400, 2)
    manifest = json.loads((root / "pre.msmseq.manifest.json").read_text())
    assert manifest["source"] == "rec.csv"
    assert cli.main(["preprocess", "--input", "rec.csv", "--out", "p.msmseq"]) == cli.EXIT_CONFIG


def test_recipe_and_report_exit_codes(root):
    assert cli.main(["recipe", "fig1c-desk", "--quick", "--out", "rq", "--seeds", "0"]) == 0
    assert (root / "rq" / "table.csv").exists()
    assert cli.main(["report", "rq"]) == 0
    cell = next((root / "rq" / "cells").iterdir())
    (cell / "metrics.csv").unlink()
    assert cli.main(["report", "rq"]) == cli.EXIT_PARTIAL
    assert cli.main(["recipe", "nope"]) == cli.EXIT_CONFIG
