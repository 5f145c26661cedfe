import json
from urllib.parse import urlsplit

import pytest

from oracles import edit_distance
from pmanet.adversarial import (LABEL_RE, PAPER_COUNTS, build_adversarial_testset, default_counts, get_host,
                                insert_hyphens, remove_insertions, swap_domain, tag_domain_subwords)
from pmanet.data import UrlRecord, load_dataset, split
from pmanet.exceptions import InsufficientSource, NoBoundaries, NoHost, Unsplittable
from pmanet.numeric import Rng
from pmanet.synthetic import synthetic_corpus
from pmanet.tokenizer import encode, train_bpe


@pytest.fixture(scope="module")
def paypal_vocab():
    v = train_bpe(["pay", "pal", "pay", "pal"], 263)
    assert v.tokenize(b"paypal") == [b"pay", b"pal"]
    return v


@pytest.fixture(scope="module")
def attack_setup():
    records = synthetic_corpus(3000, seed=11)
    train, test = split(records, (1500, 1500), seed=0)
    vocab = train_bpe([r.url for r in train], 1200)
    adv = build_adversarial_testset(test, vocab, seed=4, n_benign=400, n_malicious=200, n_adversarial=200,
                                    train_urls=[r.url for r in train])
    return train, test, vocab, adv


def test_paypal_boundary_from_own_bpe(paypal_vocab):
    assert tag_domain_subwords("http://paypal.com", paypal_vocab) == [3]
    assert tag_domain_subwords("https://www.paypal.com/x", paypal_vocab) == [7]
    assert tag_domain_subwords("paypal.co.uk", paypal_vocab) == [3]


def test_tagging_errors(paypal_vocab):
    with pytest.raises(Unsplittable):
        tag_domain_subwords("http://a.com", paypal_vocab)
    with pytest.raises(NoHost):
        tag_domain_subwords("http://10.0.0.1/login", paypal_vocab)
    with pytest.raises(NoHost):
        tag_domain_subwords("http:///path", paypal_vocab)
    # a boundary touching an existing hyphen is not eligible
    with pytest.raises(Unsplittable):
        tag_domain_subwords("http://pay-pal.com", paypal_vocab)


def test_boundaries_never_touch_dots_or_hyphens(attack_setup):
    _, test, vocab, _ = attack_setup
    seen = 0
    for r in test:
        try:
            bounds = tag_domain_subwords(r.url, vocab)
        except (NoHost, Unsplittable):
            continue
        host = get_host(r.url)
        for b in bounds:
            assert 0 < b < len(host)
            assert host[b - 1] not in ".-" and host[b] not in ".-"
        seen += 1
    assert seen > 100


def test_insert_hyphens_examples():
    url, chosen = insert_hyphens("http://paypal.com", [3], 1, Rng(123))
    assert url == "http://pay-pal.com" and chosen == [3]
    with pytest.raises(NoBoundaries):
        insert_hyphens("http://paypal.com", [3], 0, Rng(0))
    with pytest.raises(NoBoundaries):
        insert_hyphens("http://paypal.com", [3], 2, Rng(0))
    with pytest.raises(NoBoundaries):
        insert_hyphens("http://paypal.com", [], 1, Rng(0))


def test_insert_many_and_recover():
    url = "https://secureaccountloginnow.com/a?b=c"
    bounds = [6, 13, 18]
    adv, chosen = insert_hyphens(url, bounds, 3, Rng(0))
    assert adv == "https://secure-account-login-now.com/a?b=c"
    assert remove_insertions(adv, chosen) == url
    assert edit_distance(url, adv) == 3


def test_retokenization_differs(paypal_vocab):
    base, adv = "http://paypal.com", "http://pay-pal.com"
    assert encode(base, paypal_vocab).subword_ids != encode(adv, paypal_vocab).subword_ids


def test_swap_domain_keeps_benign_path():
    out = swap_domain("https://news.example.com:8443/a/b?q=1", "http://Login-Verify.tk/zz")
    assert out == "https://login-verify.tk/a/b?q=1"


def test_composition_labels_and_counts(attack_setup):
    _, _, _, adv = attack_setup
    assert adv.composition() == (400, 200, 200)
    assert all(a.label == 1 for a in adv.attacks)
    by_url = {r.url: r for r in adv.records}
    assert all(by_url[a.adversarial_url].label == 1 for a in adv.attacks)
    assert adv.counts["swap"] == 100 and adv.counts["hyphen"] == 100


def test_no_adversarial_url_in_train(attack_setup):
    train, _, _, adv = attack_setup
    train_urls = {r.url for r in train}
    assert not any(a.adversarial_url in train_urls for a in adv.attacks)


def test_validity_recovery_and_edit_distance(attack_setup):
    _, _, vocab, adv = attack_setup
    total = 0
    for a in adv.attacks:
        parts = urlsplit(a.adversarial_url)
        assert parts.scheme in ("http", "https") and parts.hostname
        host = get_host(a.adversarial_url)
        assert all(LABEL_RE.fullmatch(lab) for lab in host.split("."))
        assert remove_insertions(a.adversarial_url, a.insertion_offsets) == a.base_url
        d = edit_distance(get_host(a.base_url), host)
        assert d == len(a.insertion_offsets) == 1
        total += d
        assert encode(a.adversarial_url, vocab).subword_ids != encode(a.base_url, vocab).subword_ids
        # scheme, path and query are untouched
        b = urlsplit(a.base_url)
        assert (parts.scheme, parts.path, parts.query) == (b.scheme, b.path, b.query)
        if a.donor_malicious_url is None:
            assert a.base_url == a.original_url
    assert total / len(adv.attacks) == 1.0


def test_k_two_gives_edit_distance_two(attack_setup):
    _, test, vocab, _ = attack_setup
    adv = build_adversarial_testset(test, vocab, seed=1, n_benign=40, n_malicious=20, n_adversarial=20, k=2)
    for a in adv.attacks:
        assert edit_distance(get_host(a.base_url), get_host(a.adversarial_url)) == len(a.insertion_offsets)
        assert 1 <= len(a.insertion_offsets) <= 2


def test_determinism_and_saved_bytes(attack_setup, tmp_path):
    _, test, vocab, adv = attack_setup
    again = build_adversarial_testset(test, vocab, seed=4, n_benign=400, n_malicious=200, n_adversarial=200,
                                      train_urls=[r.url for r in attack_setup[0]])
    p1, s1 = adv.save(tmp_path / "a.csv")
    p2, s2 = again.save(tmp_path / "b.csv")
    assert p1.read_bytes() == p2.read_bytes() and s1.read_bytes() == s2.read_bytes()
    other = build_adversarial_testset(test, vocab, seed=5, n_benign=400, n_malicious=200, n_adversarial=200)
    assert [r.url for r in other.records] != [r.url for r in adv.records]
    assert len(load_dataset(p1)) == 800
    prov = json.loads(s1.read_text())
    assert prov["seed"] == 4 and len(prov["attacks"]) == 200


def test_insufficient_source(attack_setup):
    _, test, vocab, _ = attack_setup
    with pytest.raises(InsufficientSource):
        build_adversarial_testset(test, vocab, n_benign=10_000)
    tiny = [UrlRecord("http://a.com", 0), UrlRecord("http://b.com", 0), UrlRecord("http://c.tk", 1)]
    with pytest.raises(InsufficientSource):
        build_adversarial_testset(tiny, vocab)


def test_default_counts_keep_ratio():
    assert default_counts(8000, 4000) == (8000, 4000, 4000)
    assert default_counts(1000, 900) == (1000, 500, 500)
    assert PAPER_COUNTS == (80_000, 40_000, 40_000)
