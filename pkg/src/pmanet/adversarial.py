"""Compound evasion attack: hyphens between domain subwords plus domain swapping.

A benign URL becomes an adversarial malicious sample in one of two ways:
its own host gets hyphens inserted between BPE subwords, or its path and
query are grafted onto a malicious donor host which is then hyphenated.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import urlsplit

import numpy as np

from .data import BINARY_CLASSES, UrlRecord, save_dataset
from .exceptions import InsufficientSource, NoBoundaries, NoHost, Unsplittable
from .numeric import Rng
from .tokenizer import Vocab

MALICIOUS = 1
BENIGN = 0
LABEL_RE = re.compile(r"[a-z0-9]([a-z0-9-]*[a-z0-9])?")
# second-level labels that sit under a country code (example.co.uk)
_SECOND_LEVEL = frozenset("ac co com edu gov net org or ne go gob mil nic".split())
PAPER_COUNTS = (80_000, 40_000, 40_000)


@dataclass
class AttackRecord:
    original_url: str
    base_url: str
    adversarial_url: str
    insertion_offsets: list[int]  # positions in the base host, before insertion
    donor_malicious_url: str | None = None
    label: int = MALICIOUS

    @property
    def method(self) -> str:
        return "swap" if self.donor_malicious_url is not None else "hyphen"

    def to_dict(self) -> dict:
        return dict(asdict(self), method=self.method)


def host_span(url: str) -> tuple[int, int]:
    """Start and end of the host inside ``url`` (scheme optional)."""
    start = url.find("://")
    start = 0 if start < 0 or start > 16 else start + 3
    end = start
    while end < len(url) and url[end] not in "/?#":
        end += 1
    netloc = url[start:end]
    at = netloc.rfind("@")
    if at >= 0:
        start += at + 1
        netloc = netloc[at + 1:]
    if netloc.startswith("["):
        raise NoHost(f"IPv6 literal has no domain labels: {url!r}")
    colon = netloc.find(":")
    if colon >= 0:
        end = start + colon
    if end <= start:
        raise NoHost(f"no host in {url!r}")
    return start, end


def get_host(url: str) -> str:
    s, e = host_span(url)
    return url[s:e].lower()


def valid_host(host: str) -> bool:
    labels = host.split(".")
    return bool(host) and all(LABEL_RE.fullmatch(lab) for lab in labels)


def registrable_label(host: str) -> tuple[int, int]:
    """Span of the label just left of the public suffix."""
    labels = host.split(".")
    if len(labels) == 1:
        i = 0
    elif len(labels) >= 3 and len(labels[-1]) == 2 and labels[-2] in _SECOND_LEVEL:
        i = len(labels) - 3
    else:
        i = len(labels) - 2
    start = sum(len(lab) + 1 for lab in labels[:i])
    return start, start + len(labels[i])


def _is_ip(host: str) -> bool:
    return all(part.isdigit() for part in host.split("."))


def tag_domain_subwords(url: str, vocab: Vocab) -> list[int]:
    """Host offsets between consecutive BPE subwords of the registrable label.

    Offsets next to '.' or an existing '-' are excluded. Raises
    :class:`Unsplittable` when no eligible boundary remains.
    """
    host = get_host(url)
    if not valid_host(host) or _is_ip(host):
        raise NoHost(f"host {host!r} of {url!r} is not a domain name")
    lo, hi = registrable_label(host)
    label = host[lo:hi]
    pieces = vocab.tokenize(label.encode("ascii"))
    if len(pieces) < 2:
        raise Unsplittable(f"registrable label {label!r} is a single subword")
    offsets, pos = [], 0
    for piece in pieces[:-1]:
        pos += len(piece)
        if label[pos - 1] != "-" and label[pos] != "-":
            offsets.append(lo + pos)
    if not offsets:
        raise Unsplittable(f"registrable label {label!r} has no boundary away from '-'")
    return offsets


def insert_hyphens(url: str, boundaries: Sequence[int], k: int, rng: Rng) -> tuple[str, list[int]]:
    """Insert '-' at ``k`` host offsets drawn without replacement.

    Returns the new URL and the chosen offsets (ascending, relative to the
    original host).
    """
    if not boundaries or not 1 <= k <= len(boundaries):
        raise NoBoundaries(f"need 1 <= k <= {len(boundaries)} boundaries, got k={k}")
    chosen = sorted(int(b) for b in rng.choice(np.asarray(boundaries), size=k, replace=False))
    start, end = host_span(url)
    host = url[start:end]
    for b in reversed(chosen):
        host = host[:b] + "-" + host[b:]
    return url[:start] + host + url[end:], chosen


def remove_insertions(url: str, offsets: Sequence[int]) -> str:
    """Undo :func:`insert_hyphens` given its returned offsets."""
    start, end = host_span(url)
    host = url[start:end]
    for i, b in sorted(enumerate(sorted(offsets)), reverse=True):
        pos = b + i
        if host[pos] != "-":
            raise ValueError(f"no inserted hyphen at host offset {pos} in {url!r}")
        host = host[:pos] + host[pos + 1:]
    return url[:start] + host + url[end:]


def swap_domain(benign_url: str, donor_url: str) -> str:
    """Benign scheme, path and query on the donor's host."""
    b = urlsplit(benign_url if "://" in benign_url else "http://" + benign_url)
    d = host_span(donor_url)
    rest = benign_url[host_span(benign_url)[1]:]
    if rest.startswith(":"):
        # drop the benign port
        i = 1
        while i < len(rest) and rest[i].isdigit():
            i += 1
        rest = rest[i:]
    scheme = (b.scheme or "http") + "://"
    return scheme + donor_url[d[0]:d[1]].lower() + rest


@dataclass
class AdversarialSet:
    records: list[UrlRecord]
    attacks: list[AttackRecord]
    seed: int
    counts: dict[str, int]
    skipped: dict[str, int] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def composition(self) -> tuple[int, int, int]:
        adv = {a.adversarial_url for a in self.attacks}
        n_adv = sum(1 for r in self.records if r.source == "adversarial" and r.url in adv)
        n_ben = sum(1 for r in self.records if r.label == BENIGN)
        return n_ben, len(self.records) - n_ben - n_adv, n_adv

    def provenance(self) -> dict:
        return {
            "seed": self.seed,
            "counts": self.counts,
            "skipped": self.skipped,
            "settings": self.settings,
            "attacks": [a.to_dict() for a in self.attacks],
        }

    def save(self, path) -> tuple[Path, Path]:
        """CSV in the two-column dataset layout plus a ``.provenance.json`` sidecar."""
        path = Path(path)
        save_dataset(path, self.records, BINARY_CLASSES)
        side = path.with_name(path.stem + ".provenance.json")
        side.write_text(json.dumps(self.provenance(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path, side


def default_counts(n_benign_available: int, n_malicious_available: int) -> tuple[int, int, int]:
    """Largest 2:1:1 composition the source can fill."""
    m = min(n_malicious_available, n_benign_available // 2)
    return 2 * m, m, m


def build_adversarial_testset(test: Sequence[UrlRecord], vocab: Vocab, seed: int = 0,
                              n_benign: int | None = None, n_malicious: int | None = None,
                              n_adversarial: int | None = None, swap_fraction: float = 0.5, k: int = 1,
                              train_urls: Iterable[str] = ()) -> AdversarialSet:
    """Benign and malicious samples from ``test`` plus freshly built attacks.

    Counts default to the largest 2:1:1 split the source allows. Candidate
    ``j`` uses its own random substream, so the set depends only on the
    inputs and ``seed``. Attacks that already occur in ``train_urls`` or
    repeat an earlier attack are discarded.
    """
    if not 0.0 <= swap_fraction <= 1.0:
        raise ValueError(f"swap_fraction must lie in [0, 1], got {swap_fraction}")
    benign = [r for r in test if r.label == BENIGN]
    malicious = [r for r in test if r.label != BENIGN]
    dflt = default_counts(len(benign), len(malicious))
    if n_benign is None and n_malicious is None and n_adversarial is None:
        n_benign, n_malicious, n_adversarial = dflt
    else:
        n_benign = dflt[0] if n_benign is None else n_benign
        n_malicious = n_benign // 2 if n_malicious is None else n_malicious
        n_adversarial = n_malicious if n_adversarial is None else n_adversarial
    if n_benign > len(benign) or n_malicious > len(malicious):
        raise InsufficientSource(
            f"requested {n_benign} benign / {n_malicious} malicious, source has {len(benign)} / {len(malicious)}"
        )
    root = Rng(seed, "attack")
    kept_benign = [benign[i] for i in sorted(root.child("benign").permutation(len(benign))[:n_benign])]
    kept_mal = [malicious[i] for i in sorted(root.child("malicious").permutation(len(malicious))[:n_malicious])]

    donors = []
    for r in malicious:
        try:
            tag_domain_subwords(r.url, vocab)
            donors.append(r)
        except (NoHost, Unsplittable):
            continue
    if swap_fraction > 0 and not donors and n_adversarial > 0:
        raise InsufficientSource("no malicious URL has a splittable host to act as donor")

    n_swap = int(round(n_adversarial * swap_fraction)) if donors else 0
    targets = {"swap": n_swap, "hyphen": n_adversarial - n_swap}
    made = {"swap": 0, "hyphen": 0}
    forbidden = set(train_urls)
    seen = {r.url for r in kept_benign} | {r.url for r in kept_mal}
    skipped = {"no_host": 0, "unsplittable": 0, "in_train": 0, "duplicate": 0}
    attacks: list[AttackRecord] = []
    order = root.child("bases").permutation(len(benign))
    j = 0
    # a few passes so swaps can reuse bases with a fresh donor
    limit = len(benign) * 4
    while len(attacks) < n_adversarial and j < limit:
        base_rec = benign[order[j % len(benign)]]
        rng = root.child("candidate", j)
        j += 1
        method = "swap" if made["swap"] < targets["swap"] and (
            made["hyphen"] >= targets["hyphen"] or rng.random() < swap_fraction) else "hyphen"
        if method == "hyphen" and j > len(benign):
            continue  # a benign URL is hyphenated at most once per pass
        donor = None
        base_url = base_rec.url
        if method == "swap":
            donor = donors[int(rng.integers(len(donors)))]
            base_url = swap_domain(base_rec.url, donor.url)
        try:
            bounds = tag_domain_subwords(base_url, vocab)
        except NoHost:
            skipped["no_host"] += 1
            continue
        except Unsplittable:
            skipped["unsplittable"] += 1
            continue
        adv_url, offsets = insert_hyphens(base_url, bounds, min(k, len(bounds)), rng)
        if adv_url in forbidden:
            skipped["in_train"] += 1
            continue
        if adv_url in seen:
            skipped["duplicate"] += 1
            continue
        seen.add(adv_url)
        made[method] += 1
        attacks.append(AttackRecord(base_rec.url, base_url, adv_url, offsets,
                                    donor.url if donor is not None else None))
    if len(attacks) < n_adversarial:
        raise InsufficientSource(f"built {len(attacks)} of {n_adversarial} adversarial URLs; skipped {skipped}")

    records = (kept_benign + kept_mal
               + [UrlRecord(a.adversarial_url, MALICIOUS, "adversarial") for a in attacks])
    records = [records[i] for i in root.child("order").permutation(len(records))]
    counts = {"benign": n_benign, "malicious": n_malicious, "adversarial": n_adversarial,
              "swap": made["swap"], "hyphen": made["hyphen"]}
    settings = {"swap_fraction": swap_fraction, "k": k}
    return AdversarialSet(records, attacks, seed, counts, skipped, settings)
