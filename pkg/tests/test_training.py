import json
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from pmanet.exceptions import DataEmpty, DivergenceDetected, LabelOutOfRange
from pmanet.model import PMANet
from pmanet.training import (PRESETS, EncodedDataset, TrainConfig, TrainLog, ablation_table, ablation_trend,
                             cross_entropy, evaluate, fit, layer_ablation, steps_per_epoch)

f64 = torch.float64


@pytest.fixture(scope="module")
def sets(corpus, vocab):
    train = EncodedDataset.from_records(corpus[:96], vocab, 12)
    val = EncodedDataset.from_records(corpus[96:128], vocab, 12)
    return train, val


def test_cross_entropy_examples():
    assert cross_entropy(torch.zeros(3, 2, dtype=f64), torch.tensor([0, 1, 1])).item() == pytest.approx(math.log(2))
    big = torch.tensor([[80.0, -80.0]], dtype=f64)
    assert cross_entropy(big, torch.tensor([0])).item() < 1e-30
    z = torch.tensor([[1.0, 0.0], [0.0, 3.0]], dtype=f64)
    a = -torch.log_softmax(z[0], -1)[1]
    b = -torch.log_softmax(z[1], -1)[0]
    assert cross_entropy(z, torch.tensor([1, 0])).item() == pytest.approx(((a + b) / 2).item(), abs=1e-12)
    with pytest.raises(LabelOutOfRange):
        cross_entropy(z, torch.tensor([0, 2]))


def test_train_config_validation_and_presets():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    paper = PRESETS["paper"]
    assert (paper["batch_size"], paper["lr"], paper["weight_decay"], paper["epochs"]) == (64, 2e-5, 1e-4, 5)
    assert PRESETS["desk"]["lr"] == 1e-3 and PRESETS["desk"]["hidden_size"] == 64


def test_half_epoch_evals_give_ten_records(sets, vocab, tmp_path):
    train, val = sets
    model = PMANet(tiny_config(vocab), seed=0)
    cfg = TrainConfig(batch_size=32, lr=1e-3, epochs=5, evals_per_epoch=2)
    log = fit(model, train, val, cfg, out_dir=tmp_path)
    assert len(log.evals) == 10
    assert len(log.steps) == 5 * steps_per_epoch(len(train), 32) == 15
    assert [s["step"] for s in log.steps] == list(range(1, 16))
    best = log.best["val_loss"]
    assert all(best <= e["val_loss"] for e in log.evals)
    lines = (tmp_path / "val_metrics.jsonl").read_text().splitlines()
    assert len(lines) == 10 and "val_loss" in json.loads(lines[0])
    rows = (tmp_path / "train.log").read_text().splitlines()
    assert rows[0].startswith("#") and len(rows) == 16
    assert (tmp_path / "best.ckpt").exists()
    # the restored parameters are the ones that scored the best validation loss
    assert evaluate(model, val).loss == pytest.approx(best, rel=1e-6)


def test_best_pointer_tracks_minimum():
    log = TrainLog()
    for v in (0.9, 0.5, 0.7, 0.4, 0.6):
        log.record_eval({"val_loss": v})
    assert log.best["val_loss"] == 0.4 and log.best_index == 3


def test_zero_lr_leaves_parameters_bit_identical(sets, vocab):
    train, val = sets
    model = PMANet(tiny_config(vocab), seed=1)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    fit(model, train, val, TrainConfig(batch_size=32, lr=0.0, epochs=1))
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_same_seed_same_losses(sets, vocab):
    train, val = sets

    def run():
        model = PMANet(tiny_config(vocab), seed=2)
        return fit(model, train, val, TrainConfig(batch_size=8, lr=1e-3, epochs=1, seed=5, max_steps=10))

    a, b = run(), run()
    assert a.steps[9]["loss"] == b.steps[9]["loss"]
    assert [s["loss"] for s in a.steps] == [s["loss"] for s in b.steps]


def test_initial_loss_near_ln2(sets, vocab):
    train, _ = sets
    model = PMANet(tiny_config(vocab), seed=3).eval()
    idx = np.concatenate([np.flatnonzero(train.labels == 0)[:16], np.flatnonzero(train.labels == 1)[:16]])
    batch = train.batch(idx)
    with torch.no_grad():
        loss = cross_entropy(model(batch).logits, batch.labels).item()
    assert abs(loss - math.log(2)) < 0.1


def test_fit_errors(sets, vocab):
    train, val = sets
    empty = EncodedDataset([], np.zeros(0, dtype=np.int64))
    with pytest.raises(DataEmpty):
        fit(PMANet(tiny_config(vocab)), empty, val, TrainConfig())
    with pytest.raises(DataEmpty):
        fit(PMANet(tiny_config(vocab)), train, empty, TrainConfig())
    model = PMANet(tiny_config(vocab), seed=0)
    with torch.no_grad():
        model.head.fc.weight.fill_(float("nan"))
    with pytest.raises(DivergenceDetected):
        fit(model, train, val, TrainConfig(batch_size=32, epochs=1))


def test_evaluate_is_order_invariant(sets, vocab):
    _, val = sets
    model = PMANet(tiny_config(vocab), seed=4).eval()
    perm = np.random.default_rng(0).permutation(len(val))
    shuffled = EncodedDataset([val.seqs[i] for i in perm], val.labels[perm])
    a, b = evaluate(model, val), evaluate(model, shuffled)
    for key in ("accuracy", "precision", "recall", "f1", "fpr", "tp", "fp", "tn", "fn"):
        assert getattr(a.metrics, key) == getattr(b.metrics, key)
    assert a.metrics.auc == pytest.approx(b.metrics.auc, abs=1e-12)
    assert np.allclose(a.scores[perm], b.scores, atol=1e-6)


def test_all_benign_degenerate_recall(vocab, corpus):
    benign = [r for r in corpus if r.label == 0][:10]
    ds = EncodedDataset.from_records(benign, vocab, 12)
    model = PMANet(tiny_config(vocab), seed=0).eval()
    with torch.no_grad():
        model.head.fc.weight.zero_()
        model.head.fc.bias.copy_(torch.tensor([5.0, -5.0]))
    m = evaluate(model, ds).metrics
    assert m.accuracy == 1.0 and m.recall == 0.0 and m.degenerate["recall"]


def test_layer_count_selects_top_layers(vocab, sets):
    cfg = tiny_config(vocab, n_layers=4, layer_count=2)
    assert cfg.stacked_layers == [2, 3]
    assert tiny_config(vocab, n_layers=4).stacked_layers == [0, 1, 2, 3]
    assert tiny_config(vocab, n_layers=12, layer_count=3, layer_selection="spaced").stacked_layers == [0, 6, 11]
    model = PMANet(cfg, seed=0).eval()
    f = model.features(sets[1].batch(np.arange(3)))
    assert f["stack"].shape[1] == 2
    merged_top = model.merge(*f["layers"][3])
    assert torch.equal(f["stack"][:, 1], merged_top)


def test_ablation_two_rows(sets, vocab, tmp_path):
    train, val = sets
    rows = layer_ablation(train, val, val, tiny_config(vocab, n_layers=3), TrainConfig(batch_size=32, epochs=1),
                          layer_counts=(2, 3))
    assert [r["layers"] for r in rows] == [2, 3]
    for r in rows:
        assert {"accuracy", "precision", "recall", "f1", "auc"} <= set(r)
    table = ablation_table(rows).splitlines()
    assert table[0] == "layers,accuracy,precision,recall,f1,auc" and len(table) == 3
    assert ablation_trend(rows) in ("increasing", "decreasing", "mixed")
