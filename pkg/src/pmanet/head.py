"""Multi-level head: per-layer channel merge and stacking, layer-aware
attention, spatial pyramid pooling over positions, and the classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import numeric as ops
from .encoder import Affine, Dropout, RngSource, trunc_normal_
from .exceptions import InvalidLevel, ShapeMismatch

DEFAULT_LEVELS = (1, 2, 4)


class LayerMerge(nn.Module):
    """Window-1 convolution from ``[T_l; H_l]`` (2C wide) back to C, shared by all layers."""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.weight = nn.Parameter(trunc_normal_(torch.empty(hidden_size, 2 * hidden_size, 1)))
        self.bias = nn.Parameter(torch.zeros(hidden_size))

    def forward(self, t, h):
        x = ops.permute(ops.concat(t, h, axis=-1), (0, 2, 1))
        return ops.permute(ops.conv1d(x, self.weight, self.bias), (0, 2, 1))


def build_stack(outputs, merge: LayerMerge) -> torch.Tensor:
    """Merge each layer's channel pair, stack as (N, batch, W, C) and swap the
    first two axes, giving (batch, N, W, C)."""
    if not outputs:
        raise ShapeMismatch("no encoder layers to stack")
    shape = outputs[0][0].shape
    merged = []
    for t, h in outputs:
        if t.shape != shape or h.shape != shape:
            raise ShapeMismatch(f"layer outputs {tuple(t.shape)}/{tuple(h.shape)} differ from {tuple(shape)}")
        merged.append(merge(t, h))
    stack = torch.stack(merged, dim=0)
    return ops.permute(stack, (1, 0, 2, 3))


class LayerAttention(nn.Module):
    """Sigmoid channel attention over the layer axis.

    The (W, C) plane of each layer is summarised by its mean and its max;
    both summaries pass through one shared bias-free MLP (ReLU in between)
    and the sum goes through a sigmoid, giving one weight per layer.
    """

    def __init__(self, n_layers: int, reduction: int = 3):
        super().__init__()
        if n_layers < 1 or reduction < 1:
            raise ValueError("n_layers and reduction must be positive")
        hidden = max(1, math.ceil(n_layers / reduction))
        self.n_layers = n_layers
        self.reduction = reduction
        self.w0 = nn.Parameter(trunc_normal_(torch.empty(hidden, n_layers)))
        self.w1 = nn.Parameter(trunc_normal_(torch.empty(n_layers, hidden)))

    def mlp(self, f):
        return ops.matmul(ops.relu(ops.matmul(f, self.w0.t())), self.w1.t())

    def descriptors(self, x, mask=None):
        """Per-layer mean and max over real positions, each (B, N)."""
        if mask is None:
            return x.mean(dim=(2, 3)), x.amax(dim=(2, 3))
        m = mask[:, None, :, None].to(x.dtype)
        count = m.sum(dim=2, keepdim=True).clamp(min=1) * x.shape[3]
        avg = (x * m).sum(dim=(2, 3)) / count.reshape(x.shape[0], 1)
        mx = x.masked_fill(~mask[:, None, :, None], float("-inf")).amax(dim=(2, 3))
        return avg, mx

    def attention_map(self, x, mask=None):
        if x.dim() != 4 or x.shape[1] != self.n_layers:
            raise ShapeMismatch(f"expected (batch, {self.n_layers}, W, C), got {tuple(x.shape)}")
        avg, mx = self.descriptors(x, mask)
        return ops.sigmoid(ops.add(self.mlp(avg), self.mlp(mx)))

    def forward(self, x, mask=None):
        m = self.attention_map(x, mask)
        return ops.mul(x, m[:, :, None, None]), m


def spp_window(length: int, n: int) -> tuple[int, int]:
    """(window, stride) for pyramid level ``n`` over ``length`` positions."""
    if n < 1 or n > length:
        raise InvalidLevel(f"pyramid level {n} invalid for length {length}")
    return math.ceil(length / n), length // n


def spp_bins(length: int, n: int) -> list[tuple[int, int]]:
    """Half-open position ranges of the ``n`` bins; equal to sliding windows of
    ``spp_window(length, n)`` whenever ``n`` divides ``length``."""
    spp_window(length, n)
    return [((i * length) // n, -((-(i + 1) * length) // n)) for i in range(n)]


def spp(x, levels=DEFAULT_LEVELS, mask=None, grid: int | None = None) -> torch.Tensor:
    """Max-pool positions of (B, N, W, C) features into ``n`` bins per level.

    Bins are laid out on ``grid`` positions (default W); positions past W
    count as masked. Returns (B, N * C * sum(levels)) ordered as
    (N, C, bins) with levels concatenated along the bin axis. Masked
    positions never win a max, and a bin with no unmasked position is 0.
    """
    if x.dim() != 4:
        raise ShapeMismatch(f"spp expects (batch, N, W, C), got {tuple(x.shape)}")
    b, n_layers, width, c = x.shape
    grid = width if grid is None else grid
    if grid < width:
        raise ShapeMismatch(f"grid {grid} shorter than feature length {width}")
    for n in levels:
        spp_window(grid, n)
    planes = ops.permute(x, (0, 1, 3, 2))
    if mask is not None:
        planes = planes.masked_fill(~mask[:, None, None, :], float("-inf"))
    empty = x.new_zeros(b, n_layers, c)
    bins = []
    for n in levels:
        for start, end in spp_bins(grid, n):
            end = min(end, width)
            if start >= end:
                bins.append(empty)
                continue
            bins.append(planes[..., start:end].amax(dim=-1))
    out = torch.stack(bins, dim=-1)
    if mask is not None:
        out = torch.where(torch.isinf(out), torch.zeros_like(out), out)
    return ops.check_finite(out.reshape(b, -1), "spp")


@dataclass
class ClassifierOutput:
    logits: torch.Tensor
    probabilities: torch.Tensor


class ClassifierHead(nn.Module):
    """Mean over layers and pyramid bins to a C-wide summary, dropout, affine to K logits."""

    def __init__(self, n_layers: int, hidden_size: int, n_bins: int, n_classes: int = 2,
                 dropout: float = 0.1, source: RngSource | None = None):
        super().__init__()
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        self.n_layers, self.hidden_size, self.n_bins = n_layers, hidden_size, n_bins
        self.dropout = Dropout(dropout, source if source is not None else RngSource())
        self.fc = Affine(hidden_size, n_classes)

    def summarize(self, features):
        b = features.shape[0]
        grouped = ops.reshape(features, (b, self.n_layers, self.hidden_size, self.n_bins))
        return grouped.mean(dim=(1, 3))

    def forward(self, features) -> ClassifierOutput:
        logits = self.fc(self.dropout(self.summarize(features)))
        return ClassifierOutput(logits, ops.softmax(logits, axis=-1))
