"""Dual-channel character-aware transformer backbone.

The token channel is a stack of pre-norm transformer layers. The character
channel starts from a BiGRU run over the whole character stream; each token
takes the BiGRU states at its first and last character. After every layer
the two channels are fused by convolution and divided again, and the pair
``(T_l, H_l)`` is recorded for the head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from . import numeric as ops
from .exceptions import EmptySpan, ShapeMismatch
from .tokenizer import PAD, TokenSequence


@dataclass
class EncoderConfig:
    vocab_size: int = 4096
    char_vocab_size: int = 132
    n_layers: int = 12
    hidden_size: int = 64
    n_heads: int = 4
    gru_hidden: int = 32
    char_dim: int = 32
    ffn_size: int | None = None
    filter_windows: tuple[int, ...] = (2, 3)
    dropout: float = 0.1
    max_positions: int = 200
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.filter_windows = tuple(self.filter_windows)
        if self.ffn_size is None:
            self.ffn_size = 4 * self.hidden_size
        for name in ("vocab_size", "char_vocab_size", "n_layers", "hidden_size", "n_heads",
                     "gru_hidden", "char_dim", "ffn_size", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.hidden_size % self.n_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if not self.filter_windows or min(self.filter_windows) < 1:
            raise ValueError(f"bad filter windows {self.filter_windows}")
        if len(self.filter_windows) > self.hidden_size:
            raise ValueError("more filter windows than hidden units")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter_windows"] = list(self.filter_windows)
        return d


class RngSource:
    """Shared holder for the dropout stream; the trainer swaps ``rng`` per step."""

    def __init__(self, rng: ops.Rng | None = None):
        self.rng = rng


class Dropout(nn.Module):
    def __init__(self, rate: float, source: RngSource):
        super().__init__()
        self.rate = rate
        self.source = source

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        if self.source.rng is None:
            raise RuntimeError("training-mode dropout needs an Rng; call model.set_rng() first")
        return ops.dropout(x, self.rate, self.source.rng, training=True)


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std)


class Affine(nn.Module):
    """``x @ W.T + b`` over the last axis."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(trunc_normal_(torch.empty(n_out, n_in)))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight.t())
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, size: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(size))
        self.bias = nn.Parameter(torch.zeros(size))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, -1, self.eps, self.weight, self.bias)


# --------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """Padded tensors for a list of :class:`TokenSequence`.

    ``first_char``/``last_char`` index each token's first and last character
    in ``char_ids``; ``grid`` is the nominal sequence length the head pools
    over, which may exceed the trimmed ``subword_ids`` width.
    """

    subword_ids: torch.Tensor
    token_mask: torch.Tensor
    char_ids: torch.Tensor
    char_lengths: torch.Tensor
    first_char: torch.Tensor
    last_char: torch.Tensor
    grid: int
    labels: torch.Tensor | None = None

    def __len__(self):
        return self.subword_ids.shape[0]


def collate(seqs: list[TokenSequence], labels=None, trim: bool = True) -> Batch:
    """Stack sequences; with ``trim`` trailing all-PAD columns are dropped.

    Trimming is exact for the model because PAD tokens never reach real
    tokens and the head masks PAD positions on the full grid.
    """
    if not seqs:
        raise ValueError("cannot collate an empty batch")
    grid = seqs[0].m
    if any(s.m != grid for s in seqs):
        raise ShapeMismatch("sequences in a batch must share max_len")
    width = max(s.n_tokens for s in seqs) if trim else grid
    n_chars = max(s.spans[width - 1][0] + s.spans[width - 1][1] for s in seqs)
    b = len(seqs)
    sub = torch.full((b, width), PAD, dtype=torch.long)
    chars = torch.full((b, n_chars), PAD, dtype=torch.long)
    first = torch.zeros((b, width), dtype=torch.long)
    last = torch.zeros((b, width), dtype=torch.long)
    lengths = torch.zeros(b, dtype=torch.long)
    for i, s in enumerate(seqs):
        spans = s.spans[:width]
        if any(length < 1 for _, length in spans):
            raise EmptySpan(f"sequence {i} has an empty character span")
        end = spans[-1][0] + spans[-1][1]
        sub[i] = torch.tensor(s.subword_ids[:width])
        chars[i, :end] = torch.tensor(s.char_ids[:end])
        first[i] = torch.tensor([st for st, _ in spans])
        last[i] = torch.tensor([st + ln - 1 for st, ln in spans])
        lengths[i] = s.n_chars
    mask = sub != PAD
    y = None if labels is None else torch.as_tensor(labels, dtype=torch.long)
    return Batch(sub, mask, chars, lengths, first, last, grid, y)


# --------------------------------------------------------------------------
# Character channel


class CharEncoder(nn.Module):
    """Character embedding table followed by a BiGRU over the character stream."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.char_embedding = nn.Parameter(trunc_normal_(torch.empty(cfg.char_vocab_size, cfg.char_dim)))
        with torch.no_grad():
            self.char_embedding[PAD].zero_()
        self.gru = nn.GRU(cfg.char_dim, cfg.gru_hidden, batch_first=True, bidirectional=True)
        for name, p in self.gru.named_parameters():
            if name.startswith("weight_hh"):
                for block in p.data.chunk(3, dim=0):
                    nn.init.orthogonal_(block)
            elif name.startswith("weight_ih"):
                trunc_normal_(p.data)
            else:
                nn.init.zeros_(p.data)

    def embed_chars(self, char_ids):
        return ops.embedding_lookup(self.char_embedding, char_ids)

    def bigru(self, e, lengths):
        """Per-character ``[forward; backward]`` states; zero past each length."""
        packed = pack_padded_sequence(e, lengths.cpu().clamp(min=1), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        h, _ = pad_packed_sequence(out, batch_first=True, total_length=e.shape[1])
        return ops.check_finite(h, "bigru")

    def forward(self, char_ids, lengths):
        return self.bigru(self.embed_chars(char_ids), lengths)


def char_token_embed(h, first_char, last_char, proj: Affine):
    """Concatenate each token's states at its first and last character, then project."""
    idx_shape = (*first_char.shape, h.shape[-1])
    h_first = torch.gather(h, 1, first_char.unsqueeze(-1).expand(idx_shape))
    h_last = torch.gather(h, 1, last_char.unsqueeze(-1).expand(idx_shape))
    return proj(ops.concat(h_first, h_last, axis=-1))


# --------------------------------------------------------------------------
# Token channel


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig, source: RngSource):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.hidden_size // cfg.n_heads
        self.query = Affine(cfg.hidden_size, cfg.hidden_size)
        self.key = Affine(cfg.hidden_size, cfg.hidden_size)
        self.value = Affine(cfg.hidden_size, cfg.hidden_size)
        self.out = Affine(cfg.hidden_size, cfg.hidden_size)
        self.attn_dropout = Dropout(cfg.dropout, source)
        self.last_weights = None

    def _split(self, x):
        b, w, _ = x.shape
        return ops.permute(ops.reshape(x, (b, w, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, x, mask):
        b, w, c = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = ops.mul(ops.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(self.head_dim))
        key_mask = mask[:, None, None, :]
        scores = scores.masked_fill(~key_mask, torch.finfo(scores.dtype).min)
        weights = ops.softmax(scores, axis=-1)
        # a query with no visible key attends to nothing
        weights = weights * key_mask.any(dim=-1, keepdim=True).to(weights.dtype)
        self.last_weights = weights.detach()
        ctx = ops.matmul(self.attn_dropout(weights), v)
        ctx = ops.reshape(ops.permute(ctx, (0, 2, 1, 3)), (b, w, c))
        return self.out(ctx)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention and GELU feed-forward, each with a residual."""

    def __init__(self, cfg: EncoderConfig, source: RngSource):
        super().__init__()
        self.attn_norm = LayerNorm(cfg.hidden_size, cfg.layer_norm_eps)
        self.attention = SelfAttention(cfg, source)
        self.ffn_norm = LayerNorm(cfg.hidden_size, cfg.layer_norm_eps)
        self.ffn_in = Affine(cfg.hidden_size, cfg.ffn_size)
        self.ffn_out = Affine(cfg.ffn_size, cfg.hidden_size)
        self.dropout = Dropout(cfg.dropout, source)

    def forward(self, x, mask):
        x = ops.add(x, self.dropout(self.attention(self.attn_norm(x), mask)))
        y = self.ffn_out(ops.gelu(self.ffn_in(self.ffn_norm(x))))
        return ops.add(x, self.dropout(y))


class HeterogeneousInteraction(nn.Module):
    """Fuse the token and character channels and divide them again.

    Each channel gets its own affine map; the concatenation is convolved over
    token positions with one filter bank per window (tanh, "same" padding),
    the banks are concatenated back to ``hidden_size``, and two GELU affine
    maps split the fused signal into residual updates for each channel,
    followed by layer norm.
    """

    def __init__(self, cfg: EncoderConfig, source: RngSource):
        super().__init__()
        c = cfg.hidden_size
        self.token_in = Affine(c, c)
        self.char_in = Affine(c, c)
        n_win = len(cfg.filter_windows)
        counts = [c // n_win + (1 if i < c % n_win else 0) for i in range(n_win)]
        self.windows = cfg.filter_windows
        self.filters = nn.ParameterList(
            nn.Parameter(trunc_normal_(torch.empty(n, 2 * c, s))) for n, s in zip(counts, cfg.filter_windows)
        )
        self.filter_bias = nn.ParameterList(nn.Parameter(torch.zeros(n)) for n in counts)
        self.token_out = Affine(c, c)
        self.char_out = Affine(c, c)
        self.token_norm = LayerNorm(c, cfg.layer_norm_eps)
        self.char_norm = LayerNorm(c, cfg.layer_norm_eps)
        self.dropout = Dropout(cfg.dropout, source)

    def fuse(self, t, h, mask=None):
        if t.shape != h.shape:
            raise ShapeMismatch(f"token channel {tuple(t.shape)} vs char channel {tuple(h.shape)}")
        w = ops.concat(self.token_in(t), self.char_in(h), axis=-1)
        if mask is not None:
            w = w * mask.unsqueeze(-1).to(w.dtype)
        w = ops.permute(w, (0, 2, 1))
        banks = [ops.tanh(ops.conv1d(w, f, b)) for f, b in zip(self.filters, self.filter_bias)]
        return ops.permute(ops.concat(*banks, axis=1), (0, 2, 1))

    def forward(self, t, h, mask=None):
        m = self.fuse(t, h, mask)
        m_t = ops.gelu(self.token_out(m))
        m_h = ops.gelu(self.char_out(m))
        T = self.token_norm(ops.add(t, self.dropout(m_t)))
        H = self.char_norm(ops.add(h, self.dropout(m_h)))
        return T, H


# --------------------------------------------------------------------------


class DualChannelEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, source: RngSource | None = None):
        super().__init__()
        self.cfg = cfg
        self.source = source if source is not None else RngSource()
        c = cfg.hidden_size
        self.token_embedding = nn.Parameter(trunc_normal_(torch.empty(cfg.vocab_size, c)))
        self.position_embedding = nn.Parameter(trunc_normal_(torch.empty(cfg.max_positions, c)))
        self.token_norm = LayerNorm(c, cfg.layer_norm_eps)
        self.chars = CharEncoder(cfg)
        self.char_proj = Affine(4 * cfg.gru_hidden, c)
        self.char_norm = LayerNorm(c, cfg.layer_norm_eps)
        self.embed_dropout = Dropout(cfg.dropout, self.source)
        self.layers = nn.ModuleList(TransformerLayer(cfg, self.source) for _ in range(cfg.n_layers))
        self.interactions = nn.ModuleList(HeterogeneousInteraction(cfg, self.source) for _ in range(cfg.n_layers))

    def embed(self, batch: Batch):
        w = batch.subword_ids.shape[1]
        if w > self.cfg.max_positions:
            raise ShapeMismatch(f"sequence width {w} exceeds max_positions {self.cfg.max_positions}")
        tok = ops.embedding_lookup(self.token_embedding, batch.subword_ids)
        tok = ops.add(tok, self.position_embedding[:w])
        t0 = self.embed_dropout(self.token_norm(tok))
        h = self.chars(batch.char_ids, batch.char_lengths)
        h0 = char_token_embed(h, batch.first_char, batch.last_char, self.char_proj)
        h0 = self.embed_dropout(self.char_norm(h0))
        return t0, h0

    def forward(self, batch: Batch) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Return ``[(T_1, H_1), ..., (T_N, H_N)]``, each ``(batch, width, hidden)``."""
        T, H = self.embed(batch)
        outputs = []
        for layer, interaction in zip(self.layers, self.interactions):
            t = layer(T, batch.token_mask)
            T, H = interaction(t, H, batch.token_mask)
            outputs.append((T, H))
        return outputs
