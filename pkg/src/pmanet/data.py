"""URL datasets: CSV/TSV loading, deterministic (stratified) splits and TLD statistics."""
from __future__ import annotations

import csv
import ipaddress
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from urllib.parse import urlsplit

import numpy as np

from .exceptions import EmptyFile, FractionOverflow, MissingColumn, UnknownLabel
from .numeric import Rng

log = logging.getLogger(__name__)

BINARY_CLASSES = ("benign", "malicious")
MULTICLASS_CLASSES = ("benign", "defacement", "phishing", "malicious")

# ISO 3166-1 alpha-2 codes plus the four delegated exceptions ac, eu, su, uk
CCTLDS = frozenset("""
ac ad ae af ag ai al am ao aq ar as at au aw ax az ba bb bd be bf bg bh bi bj bl bm bn bo bq br bs
bt bv bw by bz ca cc cd cf cg ch ci ck cl cm cn co cr cu cv cw cx cy cz de dj dk dm do dz ec ee eg
eh er es et eu fi fj fk fm fo fr ga gb gd ge gf gg gh gi gl gm gn gp gq gr gs gt gu gw gy hk hm hn
hr ht hu id ie il im in io iq ir is it je jm jo jp ke kg kh ki km kn kp kr kw ky kz la lb lc li lk
lr ls lt lu lv ly ma mc md me mf mg mh mk ml mm mn mo mp mq mr ms mt mu mv mw mx my mz na nc ne nf
ng ni nl no np nr nu nz om pa pe pf pg ph pk pl pm pn pr ps pt pw py qa re ro rs ru rw sa sb sc sd
se sg sh si sj sk sl sm sn so sr ss st su sv sx sy sz tc td tf tg th tj tk tl tm tn to tr tt tv tw
tz ua ug uk um us uy uz va vc ve vg vi vn vu wf ws ye yt za zm zw
""".split())


@dataclass(frozen=True)
class UrlRecord:
    url: str
    label: int
    source: str = ""


@dataclass
class Schema:
    """Column names and label spellings of one dataset layout."""

    name: str
    url_column: str
    label_column: str
    label_map: dict[str, int]
    classes: tuple[str, ...] = BINARY_CLASSES
    delimiter: str | None = None  # None: tab for .tsv, comma otherwise

    def with_columns(self, url_column=None, label_column=None) -> "Schema":
        return Schema(self.name, url_column or self.url_column, label_column or self.label_column,
                      dict(self.label_map), self.classes, self.delimiter)


_BINARY_MAP = {"benign": 0, "legitimate": 0, "0": 0, "malicious": 1, "phishing": 1, "1": 1}

SCHEMAS = {
    "grambeddings": Schema("grambeddings", "url", "label", dict(_BINARY_MAP)),
    "mendeley": Schema("mendeley", "url", "label", dict(_BINARY_MAP)),
    "kaggle": Schema(
        "kaggle", "url", "type",
        {"benign": 0, "defacement": 1, "phishing": 2, "malware": 3, "malicious": 3},
        MULTICLASS_CLASSES,
    ),
}


def get_schema(schema: str | Schema) -> Schema:
    if isinstance(schema, Schema):
        return schema
    try:
        return SCHEMAS[schema]
    except KeyError:
        raise ValueError(f"unknown schema {schema!r}; known: {sorted(SCHEMAS)}") from None


def _delimiter(path: Path, schema: Schema) -> str:
    if schema.delimiter:
        return schema.delimiter
    return "\t" if path.suffix.lower() in (".tsv", ".tab") else ","


def load_dataset(path, schema: str | Schema = "grambeddings", source: str | None = None) -> list[UrlRecord]:
    """Read every well-formed row in file order; duplicates are kept.

    Rows with a missing field or an empty URL are skipped and counted in a
    single warning. A label outside the schema's map raises
    :class:`UnknownLabel`.
    """
    path = Path(path)
    schema = get_schema(schema)
    source = source or schema.name
    csv.field_size_limit(min(sys.maxsize, 2**31 - 1))
    with open(path, newline="", encoding="utf-8", errors="replace") as fh:
        reader = csv.reader(fh, delimiter=_delimiter(path, schema))
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path} is empty")
        header = [h.strip() for h in header]
        for col in (schema.url_column, schema.label_column):
            if col not in header:
                raise MissingColumn(f"{path}: column {col!r} not in header {header}")
        ui, li = header.index(schema.url_column), header.index(schema.label_column)
        need = max(ui, li) + 1
        records, skipped = [], 0
        for row in reader:
            if len(row) < need or not row[ui].strip():
                skipped += 1
                continue
            raw = row[li].strip().lower()
            if raw not in schema.label_map:
                raise UnknownLabel(f"{path}: label {row[li]!r} not in schema {schema.name!r}")
            records.append(UrlRecord(row[ui].strip(), schema.label_map[raw], source))
    if skipped:
        log.warning("%s: skipped %d malformed rows", path, skipped)
    if not records:
        raise EmptyFile(f"{path} has no data rows")
    return records


def save_dataset(path, records: Sequence[UrlRecord], classes: Sequence[str] = BINARY_CLASSES,
                 url_column: str = "url", label_column: str = "label") -> Path:
    """Write records as a two-column CSV with label names."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([url_column, label_column])
        for r in records:
            writer.writerow([r.url, classes[r.label]])
    return path


def _resolve_sizes(sizes, n: int) -> list[int]:
    sizes = list(sizes)
    if all(isinstance(s, (int, np.integer)) and not isinstance(s, bool) for s in sizes):
        counts = [int(s) for s in sizes]
        if any(c < 0 for c in counts) or sum(counts) > n:
            raise FractionOverflow(f"split sizes {counts} exceed {n} records")
        return counts
    fractions = [float(s) for s in sizes]
    if any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise FractionOverflow(f"split fractions {fractions} sum to more than 1")
    return [int(np.floor(f * n + 1e-9)) for f in fractions]


def _largest_remainder(total: int, weights: np.ndarray, caps: np.ndarray) -> np.ndarray:
    exact = total * weights / weights.sum()
    alloc = np.minimum(np.floor(exact).astype(int), caps)
    order = np.argsort(-(exact - np.floor(exact)), kind="stable")
    i = 0
    while alloc.sum() < total and i < 10 * len(order) + total:
        c = order[i % len(order)]
        if alloc[c] < caps[c]:
            alloc[c] += 1
        i += 1
    return alloc


def split(records: Sequence[UrlRecord], sizes, seed: int = 0, stratified: bool = True) -> list[list[UrlRecord]]:
    """Partition into disjoint subsets of the given sizes (counts or fractions).

    With ``stratified`` every subset keeps each class's share to within one
    sample of exact. The same seed always yields the same membership and order.
    """
    n = len(records)
    counts = _resolve_sizes(sizes, n)
    rng = Rng(seed, "split")
    if not stratified:
        perm = rng.permutation(n)
        out, start = [], 0
        for c in counts:
            out.append([records[i] for i in perm[start: start + c]])
            start += c
        return out
    labels = np.array([r.label for r in records])
    classes = np.unique(labels)
    pools = {c: list(rng.child("class", int(c)).permutation(np.flatnonzero(labels == c))) for c in classes}
    weights = np.array([len(pools[c]) for c in classes], dtype=np.float64)
    out = []
    for k, total in enumerate(counts):
        caps = np.array([len(pools[c]) for c in classes])
        alloc = _largest_remainder(total, weights, caps)
        chosen = []
        for c, a in zip(classes, alloc):
            chosen.extend(pools[c][:a])
            pools[c] = pools[c][a:]
        order = rng.child("order", k).permutation(len(chosen))
        out.append([records[chosen[i]] for i in order])
    return out


# --------------------------------------------------------------------------
# TLD statistics


@dataclass
class TldStats:
    fractions: dict[str, dict[str, float]]
    counts: dict[str, dict[str, int]]
    unparseable: int = 0

    def to_dict(self) -> dict:
        return {"fractions": self.fractions, "counts": self.counts, "unparseable": self.unparseable}


def extract_host(url: str) -> str | None:
    text = url.strip()
    if "://" not in text[:16]:
        text = "http://" + text
    try:
        host = urlsplit(text).hostname
    except ValueError:
        host = None
    if not host:
        rest = text.split("://", 1)[1]
        host = rest.split("/", 1)[0].split("?", 1)[0].rsplit("@", 1)[-1].split(":", 1)[0].lower()
    return host or None


def tld_class(url: str) -> str | None:
    """'com', 'cctld' or 'other' for the URL's last host label; None when unparseable."""
    host = extract_host(url)
    if host is None:
        return None
    host = host.rstrip(".")
    try:
        ipaddress.ip_address(host.strip("[]"))
        return "other"
    except ValueError:
        pass
    suffix = host.rsplit(".", 1)[-1]
    if not suffix:
        return None
    if suffix == "com":
        return "com"
    if suffix in CCTLDS:
        return "cctld"
    return "other"


def tld_stats(records: Sequence[UrlRecord], classes: Sequence[str] = BINARY_CLASSES) -> TldStats:
    """Share of .com, country-code and other TLDs within each class."""
    counts: dict[str, Counter] = {}
    bad = 0
    for r in records:
        kind = tld_class(r.url)
        if kind is None:
            bad += 1
            kind = "other"
        counts.setdefault(classes[r.label], Counter())[kind] += 1
    if bad:
        log.warning("counted %d URLs with unparseable hosts under other gTLDs", bad)
    fractions, plain = {}, {}
    for name, c in counts.items():
        total = sum(c.values())
        plain[name] = {k: int(c.get(k, 0)) for k in ("com", "cctld", "other")}
        fractions[name] = {k: plain[name][k] / total for k in ("com", "cctld", "other")}
    return TldStats(fractions, plain, bad)
