"""Byte-level BPE for URLs with aligned subword and character views.

URLs are handled as raw bytes, ASCII-lowercased, with percent escapes left
as-is. Before merging, a URL is split into runs of ``[a-z0-9]`` and runs of
everything else, so merges never cross a delimiter.
"""
from __future__ import annotations

import heapq
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .exceptions import EmptyCorpus, EmptyInput, UnknownId, VocabTooSmall

MAGIC = "pma-bpe-v1"
PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIALS = {"PAD": PAD, "UNK": UNK, "CLS": CLS, "SEP": SEP}
N_SPECIAL = len(SPECIALS)
BASE_VOCAB = N_SPECIAL + 256
DEFAULT_VOCAB_SIZE = 4096
DEFAULT_MAX_LEN = 200

_CHUNK = re.compile(rb"[a-z0-9]+|[^a-z0-9]+")
_PLAIN = set(range(0x21, 0x7F)) - {ord("#"), ord("\\")}


def normalize(url: str) -> bytes:
    return url.strip().encode("utf-8").lower()


def chunks(data: bytes) -> list[bytes]:
    return _CHUNK.findall(data)


def _escape(token: bytes) -> str:
    return "".join(chr(b) if b in _PLAIN else f"\\x{b:02x}" for b in token)


def _unescape(text: str) -> bytes:
    out, i = bytearray(), 0
    while i < len(text):
        if text[i] == "\\":
            out.append(int(text[i + 2: i + 4], 16))
            i += 4
        else:
            out.append(ord(text[i]))
            i += 1
    return bytes(out)


@dataclass(frozen=True)
class TokenSequence:
    """One encoded URL.

    ``subword_ids`` is padded to ``max_len``; every token, PAD included,
    owns a span of ``char_ids`` so the spans tile the character stream.
    CLS, SEP and PAD each own one synthetic character.
    """

    subword_ids: tuple[int, ...]
    char_ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    n_tokens: int  # non-PAD tokens, CLS and SEP included

    @property
    def m(self) -> int:
        return len(self.subword_ids)

    @property
    def n_chars(self) -> int:
        """Length of the non-PAD part of the character stream."""
        if self.n_tokens == self.m:
            return len(self.char_ids)
        return self.spans[self.n_tokens][0]


@dataclass
class Vocab:
    merges: list[tuple[bytes, bytes]]
    high_bytes: tuple[int, ...] = ()
    token_to_id: dict[bytes, int] = field(init=False, repr=False)
    id_to_token: list[bytes] = field(init=False, repr=False)
    ranks: dict[tuple[bytes, bytes], int] = field(init=False, repr=False)
    char_table: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        self.id_to_token = [b""] * N_SPECIAL + [bytes([b]) for b in range(256)]
        known = set(self.id_to_token[N_SPECIAL:])
        for left, right in self.merges:
            if left not in known or right not in known:
                raise ValueError(f"merge ({left!r}, {right!r}) uses an unknown part")
            self.id_to_token.append(left + right)
            known.add(left + right)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token) if i >= N_SPECIAL}
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        table = [UNK] * 256
        for b in range(128):
            table[b] = N_SPECIAL + b
        for i, b in enumerate(sorted(set(self.high_bytes))):
            table[b] = N_SPECIAL + 128 + i
        self.char_table = table
        self._cache: dict[bytes, tuple[bytes, ...]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def char_size(self) -> int:
        return N_SPECIAL + 128 + len(set(self.high_bytes))

    def char_id(self, byte: int) -> int:
        return self.char_table[byte]

    def _bpe(self, chunk: bytes) -> tuple[bytes, ...]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        parts = [bytes([b]) for b in chunk]
        while len(parts) > 1:
            best, best_rank = None, None
            for pair in zip(parts, parts[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == best:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        out = tuple(parts)
        if len(self._cache) < 200_000:
            self._cache[chunk] = out
        return out

    def tokenize(self, text: str | bytes) -> list[bytes]:
        """Subword pieces of ``text`` without specials or padding."""
        data = normalize(text) if isinstance(text, str) else text.lower()
        return [piece for chunk in chunks(data) for piece in self._bpe(chunk)]

    def to_text(self) -> str:
        lines = [MAGIC]
        lines += [f"{_escape(a)}\t{_escape(b)}" for a, b in self.merges]
        lines.append("#specials")
        lines += [f"{name} {idx}" for name, idx in SPECIALS.items()]
        lines.append("#chars " + ",".join(f"{b:02x}" for b in sorted(set(self.high_bytes))))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        lines = text.split("\n")
        if not lines or lines[0] != MAGIC:
            raise ValueError(f"not a {MAGIC} vocabulary")
        merges, high, i = [], (), 1
        while i < len(lines) and not lines[i].startswith("#"):
            if lines[i]:
                left, right = lines[i].split("\t")
                merges.append((_unescape(left), _unescape(right)))
            i += 1
        for line in lines[i:]:
            if line.startswith("#chars"):
                body = line[len("#chars"):].strip()
                high = tuple(int(h, 16) for h in body.split(",") if h)
            elif line and not line.startswith("#"):
                name, idx = line.split(" ")
                if SPECIALS.get(name) != int(idx):
                    raise ValueError(f"special token {name}={idx} does not match this build")
        return cls(merges, high)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def train_bpe(corpus: Iterable[str], vocab_size: int = DEFAULT_VOCAB_SIZE, min_frequency: int = 2) -> Vocab:
    """Learn up to ``vocab_size - 260`` merges from ``corpus``.

    Each step merges the most frequent adjacent pair; ties go to the
    lexicographically smallest pair, so the result depends only on the
    corpus contents and ``vocab_size``.
    """
    if vocab_size < BASE_VOCAB:
        raise VocabTooSmall(f"vocab_size must be >= {BASE_VOCAB} (256 bytes + {N_SPECIAL} specials), got {vocab_size}")
    counts: Counter[bytes] = Counter()
    high: set[int] = set()
    for url in corpus:
        data = normalize(url)
        high.update(b for b in data if b >= 128)
        counts.update(chunks(data))
    if not counts:
        raise EmptyCorpus("corpus has no non-empty URLs")

    words = [[bytes([b]) for b in w] for w in sorted(counts)]
    freqs = [counts[w] for w in sorted(counts)]
    pair_counts: dict[tuple[bytes, bytes], int] = defaultdict(int)
    where: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for idx, (sym, f) in enumerate(zip(words, freqs)):
        for pair in zip(sym, sym[1:]):
            pair_counts[pair] += f
            where[pair].add(idx)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[bytes, bytes]] = []
    target = vocab_size - BASE_VOCAB
    while len(merges) < target and heap:
        neg, pair = heapq.heappop(heap)
        current = pair_counts.get(pair, 0)
        if current != -neg:
            if current > 0:
                heapq.heappush(heap, (-current, pair))
            continue
        if current < min_frequency:
            break
        merges.append(pair)
        new_token = pair[0] + pair[1]
        touched: set[tuple[bytes, bytes]] = set()
        for idx in sorted(where.pop(pair, ())):
            sym, f = words[idx], freqs[idx]
            for old in zip(sym, sym[1:]):
                pair_counts[old] -= f
                touched.add(old)
            merged, i = [], 0
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == pair[0] and sym[i + 1] == pair[1]:
                    merged.append(new_token)
                    i += 2
                else:
                    merged.append(sym[i])
                    i += 1
            words[idx] = merged
            for new in zip(merged, merged[1:]):
                pair_counts[new] += f
                where[new].add(idx)
                touched.add(new)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
    return Vocab(merges, tuple(sorted(high)))


def encode(url: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """Encode ``url`` as CLS + subwords + SEP, keeping the prefix when the
    URL needs more than ``max_len - 2`` subwords, then PAD to ``max_len``."""
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    data = normalize(url)
    if not data:
        raise EmptyInput("URL is empty after stripping whitespace")
    pieces = vocab.tokenize(data)[: max_len - 2]
    sub = [CLS] + [vocab.token_to_id[p] for p in pieces] + [SEP]
    chars, spans = [CLS], [(0, 1)]
    for piece in pieces:
        spans.append((len(chars), len(piece)))
        chars.extend(vocab.char_table[b] for b in piece)
    spans.append((len(chars), 1))
    chars.append(SEP)
    n_tokens = len(sub)
    for _ in range(max_len - n_tokens):
        spans.append((len(chars), 1))
        chars.append(PAD)
        sub.append(PAD)
    return TokenSequence(tuple(sub), tuple(chars), tuple(spans), n_tokens)


def decode(seq: TokenSequence, vocab: Vocab) -> str:
    out = bytearray()
    for i in seq.subword_ids:
        if i < 0 or i >= vocab.size:
            raise UnknownId(f"subword id {i} outside vocabulary of size {vocab.size}")
        if i >= N_SPECIAL:
            out += vocab.id_to_token[i]
    return out.decode("utf-8", errors="replace")


def decode_chars(seq: TokenSequence, vocab: Vocab) -> bytes:
    """Rebuild the URL bytes from the character view alone."""
    inverse = {cid: b for b, cid in enumerate(vocab.char_table) if cid != UNK}
    out = bytearray()
    for start, length in seq.spans[1: seq.n_tokens - 1]:
        for cid in seq.char_ids[start: start + length]:
            if cid not in inverse:
                raise UnknownId(f"char id {cid} has no byte")
            out.append(inverse[cid])
    return bytes(out)
