"""Dense tensor ops with finiteness guards, reverse-mode gradients, a
counter-based RNG and the AdamW optimizer.

Tensors are plain ``torch.Tensor`` values; torch's autograd records the
graph. Every op goes through a guard that rejects NaN/Inf outputs and turns
torch shape errors into :class:`ShapeMismatch`.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import (
    IdOutOfRange,
    LabelOutOfRange,
    NonFiniteValue,
    NotScalarLoss,
    ShapeMismatch,
)

PRECISIONS = {"float64": torch.float64, "float32": torch.float32}

_CHECK_FINITE = True


def resolve_dtype(precision: str | torch.dtype) -> torch.dtype:
    if isinstance(precision, torch.dtype):
        return precision
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily toggle the NaN/Inf guard on op outputs."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = previous


def check_finite(x: torch.Tensor, kind: str) -> torch.Tensor:
    # one reduction instead of an elementwise mask; any NaN/Inf poisons the sum
    if _CHECK_FINITE and x.is_floating_point() and not bool(torch.isfinite(x.detach().sum())) \
            and not bool(torch.isfinite(x).all()):
        n_nan = int(torch.isnan(x).sum())
        n_inf = int(torch.isinf(x).sum())
        raise NonFiniteValue(
            f"{kind}: output of shape {tuple(x.shape)} has {n_nan} NaN and {n_inf} Inf entries"
        )
    return x


# --------------------------------------------------------------------------
# RNG


def derive_seed(seed: int, *labels) -> int:
    """Derive a 64-bit sub-seed from ``seed`` and a path of labels."""
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic Philox-backed generator.

    Philox is counter-based, so a stream depends only on its key; child
    streams are keyed by hashing labels into the parent seed and never
    consume the parent's stream.
    """

    def __init__(self, seed: int, *labels):
        self.seed = int(seed)
        self.labels = tuple(labels)
        self._key = derive_seed(self.seed, *labels) if labels else self.seed & (2**64 - 1)
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, *(self.labels + tuple(labels)))

    def __repr__(self):
        return f"Rng(seed={self.seed}, labels={self.labels!r})"

    def random(self, size=None, dtype=np.float64):
        return self._gen.random(size, dtype=dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def torch_seed(self) -> int:
        return int(self._gen.integers(0, 2**63 - 1))


# --------------------------------------------------------------------------
# Ops


def _guard(kind: str, fn: Callable[[], torch.Tensor]) -> torch.Tensor:
    try:
        out = fn()
    except RuntimeError as exc:
        raise ShapeMismatch(f"{kind}: {exc}") from exc
    return check_finite(out, kind)


def matmul(a, b):
    if a.dim() >= 1 and b.dim() >= 2 and a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _guard("matmul", lambda: torch.matmul(a, b))


def add(a, b):
    return _guard("add", lambda: a + b)


def mul(a, b):
    return _guard("mul", lambda: a * b)


def concat(*xs, axis: int = -1):
    return _guard("concat", lambda: torch.cat(xs, dim=axis))


def slice_(x, axis: int, start: int, stop: int):
    return _guard("slice", lambda: x.narrow(axis, start, max(0, min(stop, x.shape[axis]) - start)))


def reshape(x, shape):
    return _guard("reshape", lambda: x.reshape(shape))


def permute(x, dims):
    if sorted(dims) != list(range(x.dim())):
        raise ShapeMismatch(f"permute: {dims} is not a permutation of {x.dim()} axes")
    return _guard("permute", lambda: x.permute(*dims))


def _same_padding(length: int, window: int, stride: int) -> tuple[int, int]:
    out = math.ceil(length / stride)
    total = max((out - 1) * stride + window - length, 0)
    return total // 2, total - total // 2


def conv1d(x, weight, bias=None, stride: int = 1, padding="same"):
    """1-D convolution over the last axis of ``x`` shaped (batch, in, length).

    ``padding="same"`` keeps ``ceil(length / stride)`` outputs; even windows
    put the extra zero on the right.
    """
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv1d: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")

    def run():
        inp = x
        if padding == "same":
            left, right = _same_padding(x.shape[-1], weight.shape[-1], stride)
            inp = F.pad(x, (left, right))
            return F.conv1d(inp, weight, bias, stride=stride)
        return F.conv1d(inp, weight, bias, stride=stride, padding=int(padding))

    return _guard("conv1d", run)


def _pool(kind, fn, x, window, stride):
    if window < 1 or stride < 1 or window > x.shape[-1]:
        raise ShapeMismatch(f"{kind}: window {window}, stride {stride} on length {x.shape[-1]}")
    lead = x.shape[:-1]

    def run():
        flat = x.reshape(-1, 1, x.shape[-1])
        out = fn(flat, window, stride)
        return out.reshape(*lead, out.shape[-1])

    return _guard(kind, run)


def max_pool(x, window: int, stride: int):
    """Max over sliding windows of the last axis."""
    return _pool("max_pool", F.max_pool1d, x, window, stride)


def avg_pool(x, window: int, stride: int):
    return _pool("avg_pool", F.avg_pool1d, x, window, stride)


def softmax(x, axis: int = -1):
    return _guard("softmax", lambda: torch.softmax(x, dim=axis))


def layer_norm(x, axis: int = -1, eps: float = 1e-5, weight=None, bias=None):
    """Normalise to zero mean / unit variance along ``axis``, then apply the
    optional affine ``weight`` and ``bias``."""

    def run():
        if axis in (-1, x.dim() - 1):
            return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)
        moved = x.movedim(axis, -1)
        out = F.layer_norm(moved, (moved.shape[-1],), weight, bias, eps)
        return out.movedim(-1, axis)

    return _guard("layer_norm", run)


def gelu(x):
    return _guard("gelu", lambda: F.gelu(x))


def sigmoid(x):
    return _guard("sigmoid", lambda: torch.sigmoid(x))


def tanh(x):
    return _guard("tanh", lambda: torch.tanh(x))


def relu(x):
    return _guard("relu", lambda: torch.relu(x))


def dropout(x, rate: float, rng: Rng | None, training: bool = True):
    """Inverted dropout with a mask drawn from ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    keep = rng.random(tuple(x.shape), dtype=np.float32) >= rate
    mask = torch.from_numpy(keep).to(x.dtype)
    return _guard("dropout", lambda: x * mask / (1.0 - rate))


def embedding_lookup(weight, ids):
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= weight.shape[0]):
        raise IdOutOfRange(
            f"embedding_lookup: ids span [{int(ids.min())}, {int(ids.max())}] "
            f"but table has {weight.shape[0]} rows"
        )
    return _guard("embedding_lookup", lambda: F.embedding(ids, weight))


def cross_entropy_with_logits(logits, labels, class_weight=None):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise ShapeMismatch(f"cross_entropy: logits {tuple(logits.shape)}, labels {tuple(labels.shape)}")
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k}), got [{int(labels.min())}, {int(labels.max())}]")
    return _guard("cross_entropy_with_logits", lambda: F.cross_entropy(logits, labels, weight=class_weight))


OPS: dict[str, Callable[..., torch.Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "permute": permute,
    "conv1d": conv1d,
    "max_pool": max_pool,
    "avg_pool": avg_pool,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "dropout": dropout,
    "embedding_lookup": embedding_lookup,
    "cross_entropy_with_logits": cross_entropy_with_logits,
}


def forward_op(kind: str, *inputs, **params) -> torch.Tensor:
    """Dispatch ``kind`` on ``inputs``; see :data:`OPS` for the supported kinds."""
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return op(*inputs, **params)


# --------------------------------------------------------------------------
# Gradients


def _graph_leaves(loss: torch.Tensor) -> list[torch.Tensor]:
    leaves, seen, stack = [], set(), [loss.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        seen.add(node)
        variable = getattr(node, "variable", None)
        if variable is not None:
            leaves.append(variable)
        stack.extend(fn for fn, _ in node.next_functions)
    return leaves


def backward(loss: torch.Tensor, params=None) -> dict:
    """Gradients of a scalar ``loss``.

    ``params`` may be a name->tensor mapping (result keyed by name), an
    iterable of tensors, or None to collect every requires-grad leaf.
    """
    if loss.numel() != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if isinstance(params, dict):
        names, tensors = list(params), list(params.values())
    else:
        tensors = _graph_leaves(loss) if params is None else list(params)
        names = tensors
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        name: torch.zeros_like(t) if g is None else g
        for name, t, g in zip(names, tensors, grads)
    }


def finite_difference_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    a, n = analytic.detach().double(), numeric.detach().double()
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


# --------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


def _adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    # in place on p, m, v
    p.mul_(1 - lr * weight_decay)
    m.mul_(beta1).add_(g, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)


def adamw_step(state: AdamWState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Functional AdamW: returns updated copies of ``params`` and advances ``state``."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} grads")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    out = []
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
        new = p.detach().clone()
        _adamw_update(new, g.detach(), m, v, state.step, state.lr, state.beta1, state.beta2, state.eps, state.weight_decay)
        out.append(new)
    return out


class AdamW(torch.optim.Optimizer):
    """AdamW with decoupled weight decay, as a drop-in torch optimizer."""

    def __init__(self, params: Iterable, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)
        self.step_count = 0

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        self.step_count += 1
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                if state["exp_avg"].shape != p.grad.shape:
                    raise ShapeMismatch(f"moment {tuple(state['exp_avg'].shape)} vs grad {tuple(p.grad.shape)}")
                state["step"] += 1
                _adamw_update(
                    p, p.grad, state["exp_avg"], state["exp_avg_sq"], state["step"],
                    group["lr"], beta1, beta2, group["eps"], group["weight_decay"],
                )
        return loss
