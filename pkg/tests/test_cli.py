import csv
import json
import subprocess
import sys

import pytest

from pmanet.cli import main
from pmanet.data import UrlRecord, save_dataset

TINY = ["n_layers=2", "hidden_size=8", "n_heads=2", "gru_hidden=4", "char_dim=4", "max_len=16", "batch_size=16",
        "epochs=2"]


def overrides(items=TINY):
    out = []
    for item in items:
        out += ["--override", item]
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--n", "400", "--split", "240,80,80", "--seed", "3", "--out-dir", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    rc = main(["train", "--preset", "desk", "--data", str(data_dir / "train.csv"), "--val", str(data_dir / "val.csv"),
               "--seed", "7", "--train-vocab", "--vocab-size", "500", "--out-dir", str(run), *overrides()])
    assert rc == 0
    return run


def test_train_writes_artifacts(trained):
    for name in ("best.ckpt", "train.log", "val_metrics.jsonl", "trainlog.json", "metrics.json", "vocab.txt"):
        assert (trained / name).exists(), name
    rows = [line.split() for line in (trained / "train.log").read_text().splitlines()[1:]]
    assert {r[1] for r in rows} == {"0", "1"}
    assert len(rows) == 2 * 15
    assert "auc" in json.loads((trained / "metrics.json").read_text())


def test_override_epochs_one_gives_one_epoch(data_dir, tmp_path):
    rc = main(["train", "--data", str(data_dir / "train.csv"), "--val", str(data_dir / "val.csv"), "--train-vocab",
               "--vocab-size", "500", "--out-dir", str(tmp_path), *overrides(TINY[:-1] + ["epochs=1"])])
    assert rc == 0
    epochs = {line.split()[1] for line in (tmp_path / "train.log").read_text().splitlines()[1:]}
    assert epochs == {"0"}


def test_predict_rows_and_statelessness(trained, tmp_path, capsys):
    urls = ["http://news.example.com/a", "http://paypal-login.verify.tk/x", "http://news.example.com/a"]
    capsys.readouterr()
    assert main(["predict", "--checkpoint", str(trained / "best.ckpt"), *urls]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 3 and [r["url"] for r in rows] == urls
    assert all(0.0 <= float(r["probability"]) <= 1.0 for r in rows)
    assert rows[0]["probability"] == rows[2]["probability"]
    assert main(["predict", "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path / "p.csv"), *urls]) == 0
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 4


def test_eval_perfect_separation_gives_auc_one(trained, data_dir, tmp_path, capsys):
    urls = sorted({r["url"] for r in csv.DictReader(open(data_dir / "test.csv"))})[:40]
    capsys.readouterr()
    main(["predict", "--checkpoint", str(trained / "best.ckpt"), *urls])
    scored = [(float(r["probability"]), r["url"]) for r in csv.DictReader(capsys.readouterr().out.splitlines())]
    scored.sort()
    lo, hi = scored[:20], scored[20:]
    assert lo[-1][0] < hi[0][0]
    records = [UrlRecord(u, 0) for _, u in lo] + [UrlRecord(u, 1) for _, u in hi]
    save_dataset(tmp_path / "toy.csv", records)
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--test", str(tmp_path / "toy.csv"),
                 "--out-dir", str(tmp_path / "ev"), "--scores"]) == 0
    report = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert report["auc"] == 1.0 and "0.001" in report["tpr_at_fpr"]
    roc = (tmp_path / "ev" / "roc.csv").read_text().splitlines()
    assert roc[0] == "fpr,tpr" and len(roc) >= 3
    assert (tmp_path / "ev" / "scores.csv").exists()


def test_attack_twice_is_byte_identical(trained, data_dir, tmp_path):
    args = ["attack", "--test", str(data_dir / "test.csv"), "--data", str(data_dir / "train.csv"),
            "--vocab", str(trained / "vocab.txt"), "--seed", "7", "--n-benign", "20", "--n-malicious", "10",
            "--n-adversarial", "10"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.provenance.json").exists()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 41


def test_stats_writes_fractions(data_dir, tmp_path):
    assert main(["stats", "--data", str(data_dir / "train.csv"), "--out-dir", str(tmp_path)]) == 0
    stats = json.loads((tmp_path / "tld_stats.json").read_text())
    for f in stats["fractions"].values():
        assert abs(sum(f.values()) - 1.0) < 1e-6


def test_ablate_two_counts(data_dir, tmp_path):
    rc = main(["ablate", "--layers", "1,2", "--data", str(data_dir / "train.csv"), "--val", str(data_dir / "val.csv"),
               "--test", str(data_dir / "test.csv"), "--vocab-size", "500", "--out-dir", str(tmp_path),
               *overrides(TINY[:-1] + ["epochs=1"])])
    assert rc == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "layers,accuracy,precision,recall,f1,auc" and len(lines) == 3
    assert "trend" in json.loads((tmp_path / "ablation.json").read_text())


def test_ablate_rejects_count_beyond_depth(data_dir, tmp_path):
    rc = main(["ablate", "--layers", "2,12", "--data", str(data_dir / "train.csv"), "--val",
               str(data_dir / "val.csv"), "--test", str(data_dir / "test.csv"), "--vocab-size", "500",
               "--out-dir", str(tmp_path), *overrides()])
    assert rc == 2


def test_missing_file_exits_two(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["train", "--data", str(missing), "--train-vocab"]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["train", "--data", str(missing), "--override", "bogus=1"]) == 2
    assert main(["predict", "--checkpoint", str(missing), "http://a.com"]) == 2


def test_bad_checkpoint_exits_two(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_text("garbage")
    assert main(["predict", "--checkpoint", str(bad), "http://a.com"]) == 2


def test_divergence_exits_three(data_dir, tmp_path):
    rc = main(["train", "--data", str(data_dir / "train.csv"), "--val", str(data_dir / "val.csv"), "--train-vocab",
               "--vocab-size", "500", "--out-dir", str(tmp_path), *overrides(TINY[:-1] + ["epochs=1", "lr=1e38"])])
    assert rc == 3


def test_console_script_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "pmanet.cli", "synth", "--n", "10", "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and (tmp_path / "synthetic.csv").exists()
    usage = subprocess.run([sys.executable, "-m", "pmanet.cli", "train", "--preset", "nope"], capture_output=True)
    assert usage.returncode == 2
