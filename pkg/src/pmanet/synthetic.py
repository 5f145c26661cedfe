"""Synthetic benign/malicious URL corpus in the two-column Grambeddings layout.

Used for demos and for the scaled-down acceptance runs when the public
datasets are not on disk. Class-conditional TLD mixes follow the published
Grambeddings shares; roughly one malicious URL in twelve carries no
malicious tell and a few benign URLs look suspicious, so the task is not
perfectly separable.
"""
from __future__ import annotations

import string

from .data import UrlRecord
from .numeric import Rng

WORDS = """
news daily world tech guide health travel food home garden music sport games book store
market city times post journal review learn school college media cloud photo video film
design studio craft auto motor energy green water solar finance invest money credit insure
legal law office jobs career house realty build tool parts pet dog cat kids baby family
fashion style beauty shoe watch art gallery museum science nature ocean river mountain
forest weather star light fire open free smart quick prime global local union first
best top blue red golden silver north south east west digital data soft net web link
""".split()

BRANDS = """
paypal apple amazon microsoft netflix google facebook chase wellsfargo bankofamerica
dropbox docusign office365 outlook instagram whatsapp linkedin dhl fedex usps adobe
steam coinbase blockchain ebay yahoo icloud hsbc santander binance
""".split()

PHISH_WORDS = """
login signin verify secure account update confirm webscr billing support recovery
unlock auth wallet validation session password security alert suspended limited
""".split()

SECTIONS = "about products services blog news category articles wiki help docs shop support events".split()
FREE_HOSTS = "000webhostapp.com weebly.com firebaseapp.com wixsite.com blogspot.com web.app herokuapp.com github.io".split()

# (com, country-code, other) shares per class
BENIGN_TLDS = (0.5217, 0.1204, 0.3579)
MALICIOUS_TLDS = (0.6010, 0.1182, 0.2808)
BENIGN_CC = "de uk fr it nl ru br in jp au ca es pl se ch".split()
BENIGN_OTHER = "org net edu gov info io".split()
MALICIOUS_CC = "tk ml ga cf ru br in cn cc co pw".split()
MALICIOUS_OTHER = "xyz top online site club info net app live icu buzz".split()


def _pick(rng: Rng, items):
    return items[int(rng.integers(len(items)))]


def _tld(rng: Rng, shares, cc, other) -> str:
    u = rng.random()
    if u < shares[0]:
        return "com"
    if u < shares[0] + shares[1]:
        return _pick(rng, cc)
    return _pick(rng, other)


def _token(rng: Rng, n: int, alphabet=string.ascii_lowercase + string.digits) -> str:
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=n))


def _slug(rng: Rng, lo=2, hi=6) -> str:
    return "-".join(_pick(rng, WORDS) for _ in range(int(rng.integers(lo, hi + 1))))


def _benign(rng: Rng) -> str:
    tld = _tld(rng, BENIGN_TLDS, BENIGN_CC, BENIGN_OTHER)
    name = _pick(rng, WORDS) + (_pick(rng, WORDS) if rng.random() < 0.6 else "")
    host = ("www." if rng.random() < 0.6 else "") + f"{name}.{tld}"
    scheme = "https://" if rng.random() < 0.7 else "http://"
    kind = rng.random()
    if kind < 0.15:
        path = "/"
    elif kind < 0.45:
        path = f"/{_pick(rng, SECTIONS)}/{_slug(rng)}"
    elif kind < 0.65:
        path = f"/{int(rng.integers(2005, 2024))}/{int(rng.integers(1, 13)):02d}/{_slug(rng)}.html"
    elif kind < 0.8:
        path = f"/{_pick(rng, SECTIONS)}?page={int(rng.integers(1, 50))}&sort={_pick(rng, ['new', 'top', 'price'])}"
    elif kind < 0.93:
        path = f"/{_pick(rng, SECTIONS)}/{int(rng.integers(100, 99999))}"
    else:
        # legitimate sign-in pages of real brands
        brand = _pick(rng, BRANDS)
        host = f"{_pick(rng, ['accounts', 'login', 'www'])}.{brand}.com"
        path = f"/{_pick(rng, ['signin', 'login', 'account'])}"
    return scheme + host + path


def _malicious(rng: Rng) -> str:
    tld = _tld(rng, MALICIOUS_TLDS, MALICIOUS_CC, MALICIOUS_OTHER)
    brand, kw = _pick(rng, BRANDS), _pick(rng, PHISH_WORDS)
    scheme = "http://" if rng.random() < 0.6 else "https://"
    kind = rng.random()
    if kind < 0.2:
        host = f"{brand}-{kw}-{_pick(rng, PHISH_WORDS)}.{tld}"
        path = f"/{kw}/{_pick(rng, ['login.php', 'index.php', 'verify.html', ''])}"
    elif kind < 0.35:
        host = f"{_token(rng, int(rng.integers(6, 12)))}.{_pick(rng, FREE_HOSTS)}"
        path = f"/{brand}/{kw}/"
    elif kind < 0.45:
        host = ".".join(str(int(x)) for x in rng.integers(1, 255, size=4))
        path = f"/{brand}/{kw}.html"
    elif kind < 0.6:
        host = f"{_pick(rng, WORDS)}{_pick(rng, WORDS)}.{tld}"
        path = f"/wp-content/{_token(rng, 6)}/{brand}/index.php?{kw}={_token(rng, 16, '0123456789abcdef')}"
    elif kind < 0.72:
        host = f"www.{brand}.com.{_token(rng, 5)}-{kw}.{tld}"
        path = f"/{kw}?session={_token(rng, 24)}"
    elif kind < 0.84:
        host = f"{_token(rng, int(rng.integers(8, 20)))}.{_pick(rng, WORDS)}.{tld}"
        path = f"/{kw}/?email={_pick(rng, WORDS)}@{_pick(rng, ['gmail', 'yahoo', 'outlook'])}.com"
    elif kind < 0.92:
        host = f"{brand}{_pick(rng, ['-', ''])}{kw}{int(rng.integers(1, 999))}.{tld}"
        path = "/"
    else:
        # no tell at all: looks like an ordinary site
        return _benign(rng)
    return scheme + host + path


def synthetic_corpus(n: int, seed: int = 0, malicious_fraction: float = 0.5) -> list[UrlRecord]:
    """``n`` records in a fixed class ratio; record ``i`` depends only on (seed, i)."""
    n_mal = int(round(n * malicious_fraction))
    labels = [1] * n_mal + [0] * (n - n_mal)
    order = Rng(seed, "synthetic", "order").permutation(n)
    out = []
    for i, j in enumerate(order):
        rng = Rng(seed, "synthetic", i)
        label = labels[int(j)]
        url = _malicious(rng) if label else _benign(rng)
        out.append(UrlRecord(url, label, "synthetic"))
    return out
