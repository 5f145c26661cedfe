"""The full network: dual-channel encoder plus multi-level head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import numeric as ops
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import Batch, DualChannelEncoder, EncoderConfig, RngSource
from .exceptions import BadCheckpoint
from .head import DEFAULT_LEVELS, ClassifierHead, ClassifierOutput, LayerAttention, LayerMerge, build_stack, spp


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_classes: int = 2
    levels: tuple[int, ...] = DEFAULT_LEVELS
    reduction: int = 3
    layer_count: int | None = None  # stack only the last k layers; None = all
    layer_selection: str = "last"  # "last" or "spaced"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.levels = tuple(self.levels)
        n = self.encoder.n_layers
        if self.layer_count is not None and not 1 <= self.layer_count <= n:
            raise ValueError(f"layer_count must be in [1, {n}], got {self.layer_count}")
        if self.layer_selection not in ("last", "spaced"):
            raise ValueError(f"unknown layer_selection {self.layer_selection!r}")

    @property
    def stacked_layers(self) -> list[int]:
        """0-based encoder layers that feed the head, lowest first."""
        n = self.encoder.n_layers
        k = n if self.layer_count is None else self.layer_count
        if self.layer_selection == "last" or k == n:
            return list(range(n - k, n))
        if k == 1:
            return [n - 1]
        return sorted({round(i * (n - 1) / (k - 1)) for i in range(k)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


def _trunc_normal(rng: ops.Rng, shape, std=0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def _glorot(rng: ops.Rng, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng: ops.Rng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


@torch.no_grad()
def init_parameters(module: nn.Module, seed: int = 0):
    """Platform-independent init from the Philox stream of ``seed``.

    Affine, convolution and subword/position embeddings: truncated normal,
    std 0.02. Character embeddings: standard normal, PAD row 0. GRU input
    matrices: Glorot uniform per gate block; recurrent matrices: orthogonal
    per gate block. Norm gains: 1. Biases: 0.

    Unit-scale characters keep the GRU out of its near-zero regime, where the
    character LayerNorm would only rescale by 1/sqrt(eps).
    """
    for name, p in module.named_parameters():
        rng = ops.Rng(seed, "init", name)
        leaf = name.rsplit(".", 1)[-1]
        if "weight_hh" in leaf:
            g = p.shape[1]
            value = np.concatenate([_orthogonal(rng, g) for _ in range(p.shape[0] // g)], axis=0)
        elif "weight_ih" in leaf:
            g = p.shape[0] // 3
            value = np.concatenate([_glorot(rng, (g, p.shape[1])) for _ in range(3)], axis=0)
        elif leaf == "char_embedding":
            value = rng.normal(0.0, 1.0, size=tuple(p.shape))
            value[0] = 0.0
        elif p.dim() == 1 and "norm" in name and leaf == "weight":
            value = np.ones(p.shape)
        elif p.dim() == 1:
            value = np.zeros(p.shape)
        else:
            value = _trunc_normal(rng, tuple(p.shape))
        p.copy_(torch.from_numpy(value).to(p.dtype))


class PMANet(nn.Module):
    """URL classifier combining every encoder layer through attention and SPP.

    Call :meth:`set_rng` before a training-mode forward so dropout masks are
    reproducible.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.source = RngSource()
        enc = cfg.encoder
        self.encoder = DualChannelEncoder(enc, self.source)
        n_stack = len(cfg.stacked_layers)
        self.merge = LayerMerge(enc.hidden_size)
        self.attention = LayerAttention(n_stack, cfg.reduction)
        self.head = ClassifierHead(n_stack, enc.hidden_size, sum(cfg.levels), cfg.n_classes, enc.dropout, self.source)
        init_parameters(self, seed)

    def set_rng(self, rng: ops.Rng | None):
        self.source.rng = rng

    def features(self, batch: Batch) -> dict:
        """Every intermediate of a forward pass, for inspection and tests."""
        outputs = self.encoder(batch)
        chosen = [outputs[i] for i in self.cfg.stacked_layers]
        stack = build_stack(chosen, self.merge)
        weighted, attn = self.attention(stack, batch.token_mask)
        pooled = spp(weighted, self.cfg.levels, batch.token_mask, batch.grid)
        out = self.head(pooled)
        return {
            "layers": outputs, "stack": stack, "attention": attn, "weighted": weighted,
            "spp": pooled, "logits": out.logits, "probabilities": out.probabilities,
        }

    def forward(self, batch: Batch) -> ClassifierOutput:
        f = self.features(batch)
        return ClassifierOutput(f["logits"], f["probabilities"])

    # ------------------------------------------------------------------
    # persistence

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def save(self, path, extra_meta: dict | None = None):
        dtype = next(self.parameters()).dtype
        meta = {"config": self.cfg.to_dict(), "precision": str(dtype).replace("torch.", "")}
        meta.update(extra_meta or {})
        return save_checkpoint(path, self.state_dict(), meta)

    def load_tensors(self, tensors: dict[str, torch.Tensor]):
        own = self.state_dict()
        missing = sorted(set(own) - set(tensors))
        unexpected = sorted(set(tensors) - set(own))
        if missing or unexpected:
            raise BadCheckpoint(f"checkpoint tensors do not match model: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, t in own.items():
            if tuple(tensors[name].shape) != tuple(t.shape):
                raise BadCheckpoint(
                    f"shape mismatch for {name}: checkpoint {tuple(tensors[name].shape)} vs model {tuple(t.shape)}"
                )
        self.load_state_dict({k: v.to(own[k].dtype) for k, v in tensors.items()})

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> tuple["PMANet", dict]:
        tensors, meta = load_checkpoint(path)
        if cfg is None:
            if "config" not in meta:
                raise BadCheckpoint(f"{path} carries no model config")
            cfg = ModelConfig.from_dict(meta["config"])
        model = cls(cfg)
        dtype = ops.resolve_dtype(meta.get("precision", "float32"))
        model.to(dtype)
        model.load_tensors(tensors)
        return model, meta
