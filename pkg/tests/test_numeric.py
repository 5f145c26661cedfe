import math
import subprocess
import sys

import numpy as np
import pytest
import torch

from gradcases import check_kind, op_cases
from oracles import adamw_reference
from pmanet import numeric as ops
from pmanet.checkpoint import load_checkpoint, save_checkpoint
from pmanet.exceptions import (BadCheckpoint, IdOutOfRange, LabelOutOfRange, NonFiniteValue, NotScalarLoss,
                               ShapeMismatch)

f64 = torch.float64


def t(x):
    return torch.tensor(x, dtype=f64)


def test_gelu_and_sigmoid_at_zero():
    assert ops.forward_op("gelu", t([0.0])).item() == 0.0
    assert ops.forward_op("sigmoid", t([0.0])).item() == 0.5


def test_permute_swaps_leading_axes():
    x = torch.zeros(12, 4, 200, 64)
    assert ops.forward_op("permute", x, dims=(1, 0, 2, 3)).shape == (4, 12, 200, 64)


def test_max_pool_definition():
    out = ops.forward_op("max_pool", t([[1.0, 3.0, 2.0, 5.0]]), window=2, stride=2)
    assert out.tolist() == [[3.0, 5.0]]


def test_conv1d_same_padding_keeps_length():
    x = torch.randn(2, 3, 11, dtype=f64)
    for window in (1, 2, 3, 4):
        w = torch.randn(5, 3, window, dtype=f64)
        assert ops.conv1d(x, w).shape == (2, 5, 11)


@pytest.mark.parametrize("kind", sorted(ops.OPS))
def test_gradient_matches_finite_differences(kind):
    inputs, fn = op_cases()[kind]
    assert check_kind(inputs, fn) < 1e-3


def test_backward_examples():
    x = t([1.0, 2.0]).requires_grad_()
    g = ops.backward(ops.mul(x, x).sum(), [x])
    assert g[x].tolist() == [2.0, 4.0]
    z = t(0.0).requires_grad_()
    assert ops.backward(ops.sigmoid(z), {"z": z})["z"].item() == pytest.approx(0.25)


def test_backward_collects_leaves_and_rejects_vectors():
    a = t([1.0, 2.0]).requires_grad_()
    b = t([3.0]).requires_grad_()
    grads = ops.backward((a * b).sum())
    assert {id(k) for k in grads} == {id(a), id(b)}
    with pytest.raises(NotScalarLoss):
        ops.backward(a * 2)


def test_softmax_and_layer_norm_properties():
    x = torch.empty(50, 9, dtype=f64).uniform_(-2, 2)
    p = ops.softmax(x, axis=-1)
    assert torch.allclose(p.sum(-1), torch.ones(50, dtype=f64), atol=1e-9)
    assert bool((p > 0).all() and (p < 1).all())
    y = ops.layer_norm(x, axis=-1)
    assert float(y.mean(-1).abs().max()) < 1e-6
    assert float((y.var(-1, unbiased=False) - 1).abs().max()) < 1e-4
    # along a non-final axis
    y0 = ops.layer_norm(x, axis=0)
    assert float(y0.mean(0).abs().max()) < 1e-6


def test_dropout_identity_and_unbiased():
    x = torch.full((4, 5), 3.0, dtype=f64)
    assert ops.dropout(x, 0.0, ops.Rng(0)) is x
    assert ops.dropout(x, 0.5, None, training=False) is x
    mean = torch.stack([ops.dropout(x, 0.3, ops.Rng(s, "drop")) for s in range(1000)]).mean(0)
    assert float((mean / x - 1).abs().max()) < 0.05
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, ops.Rng(0))


def test_shape_and_finiteness_errors():
    with pytest.raises(ShapeMismatch):
        ops.forward_op("matmul", torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(ShapeMismatch):
        ops.forward_op("add", torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(NonFiniteValue):
        ops.forward_op("mul", t([1.0, math.inf]), t([1.0, 1.0]))
    with pytest.raises(IdOutOfRange):
        ops.embedding_lookup(torch.zeros(3, 2), torch.tensor([0, 3]))
    with pytest.raises(LabelOutOfRange):
        ops.cross_entropy_with_logits(torch.zeros(2, 2), torch.tensor([0, 2]))
    with pytest.raises(ValueError):
        ops.forward_op("nope", t([1.0]))


def test_finite_checks_can_be_disabled():
    with ops.finite_checks(False):
        out = ops.forward_op("mul", t([math.nan]), t([1.0]))
    assert math.isnan(out.item())


def test_cross_entropy_uniform_is_ln2():
    loss = ops.cross_entropy_with_logits(torch.zeros(4, 2, dtype=f64), torch.tensor([0, 1, 1, 0]))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_rng_is_deterministic_and_labelled():
    a, b = ops.Rng(7, "x").random(5), ops.Rng(7, "x").random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, ops.Rng(7, "y").random(5))
    assert np.array_equal(ops.Rng(7).child("x").random(5), ops.Rng(7, "x").random(5))


def test_rng_stream_is_identical_across_processes():
    code = "from pmanet.numeric import Rng; print(list(Rng(42, 'init', 'w').random(4)))"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert out.strip() == str(list(ops.Rng(42, "init", "w").random(4)))


# ---------------------------------------------------------------- AdamW


def test_adamw_single_step_hand_value():
    state = ops.AdamWState(lr=0.1)
    (p,) = ops.adamw_step(state, [t([1.0])], [t([1.0])])
    assert p.item() == pytest.approx(0.9, abs=1e-6)
    assert state.step == 1


def test_adamw_zero_grad_and_decay():
    (p,) = ops.adamw_step(ops.AdamWState(lr=0.1), [t([2.0])], [t([0.0])])
    assert p.item() == 2.0
    (p,) = ops.adamw_step(ops.AdamWState(lr=0.1, weight_decay=0.1), [t([1.0])], [t([0.0])])
    assert p.item() == pytest.approx(0.99, abs=1e-12)


def test_adamw_matches_reference_over_many_steps():
    grads = [0.3, -1.2, 0.7, 2.0, -0.1]
    p = torch.nn.Parameter(t([0.5]))
    opt = ops.AdamW([p], lr=0.05, weight_decay=0.01)
    for g in grads:
        p.grad = t([g])
        opt.step()
    expected = adamw_reference(0.5, grads, 0.05, 0.9, 0.999, 1e-8, 0.01)
    assert p.item() == pytest.approx(expected, abs=1e-12)
    assert opt.step_count == len(grads)


def test_adamw_agrees_with_torch():
    torch.manual_seed(0)
    w0 = torch.randn(4, 3, dtype=f64)
    a, b = torch.nn.Parameter(w0.clone()), torch.nn.Parameter(w0.clone())
    mine = ops.AdamW([a], lr=1e-2, weight_decay=1e-4)
    ref = torch.optim.AdamW([b], lr=1e-2, weight_decay=1e-4)
    for _ in range(5):
        g = torch.randn(4, 3, dtype=f64)
        a.grad, b.grad = g.clone(), g.clone()
        mine.step()
        ref.step()
    assert torch.allclose(a, b, atol=1e-12)


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ops.adamw_step(ops.AdamWState(), [t([1.0, 2.0])], [t([1.0])])


# ----------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_and_bytes(tmp_path):
    tensors = {"b": torch.arange(6, dtype=torch.float32).reshape(2, 3), "a": t([1.5, -2.0]),
               "ids": torch.tensor([1, 2, 3])}
    p1 = save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": 1})
    p2 = save_checkpoint(tmp_path / "y.ckpt", dict(reversed(tensors.items())), {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().startswith(b"pma-v1\n")
    loaded, meta = load_checkpoint(p1)
    assert meta == {"k": 1}
    for k, v in tensors.items():
        assert loaded[k].dtype == v.dtype and torch.equal(loaded[k], v)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint\n")
    with pytest.raises(BadCheckpoint):
        load_checkpoint(bad)
    good = save_checkpoint(tmp_path / "g.ckpt", {"w": torch.ones(100)})
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(BadCheckpoint):
        load_checkpoint(cut)
