import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from pmanet.encoder import EncoderConfig  # noqa: E402
from pmanet.model import ModelConfig  # noqa: E402
from pmanet.synthetic import synthetic_corpus  # noqa: E402
from pmanet.tokenizer import train_bpe  # noqa: E402

torch.set_num_threads(1)

# "criterion N" -> (status, detail); details come from the tests, status from pytest
ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


def record(n: int, detail: str):
    ACCEPTANCE_RESULTS[f"criterion {n}"] = ("PENDING", detail)


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus(400, seed=3)


@pytest.fixture(scope="session")
def vocab(corpus):
    return train_bpe([r.url for r in corpus], 600)


def tiny_config(vocab, n_layers=2, hidden=8, heads=2, gru=4, char_dim=4, max_len=12, dropout=0.1, **kw):
    enc = EncoderConfig(vocab_size=vocab.size, char_vocab_size=vocab.char_size, n_layers=n_layers,
                        hidden_size=hidden, n_heads=heads, gru_hidden=gru, char_dim=char_dim,
                        max_positions=max_len, dropout=dropout)
    return ModelConfig(enc, **kw)


@pytest.fixture
def tiny_cfg(vocab):
    return tiny_config(vocab)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    key = f"criterion {mark.args[0]}"
    detail = ACCEPTANCE_RESULTS.get(key, ("", ""))[1]
    if rep.skipped:
        reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        ACCEPTANCE_RESULTS[key] = ("SKIP", reason.removeprefix("Skipped: "))
    elif rep.failed:
        msg = str(call.excinfo.value).strip().splitlines()[0] if call.excinfo else "failed"
        ACCEPTANCE_RESULTS[key] = ("FAIL", f"{detail} | {msg}" if detail else msg)
    else:
        ACCEPTANCE_RESULTS[key] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[1])):
        status, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{status:4s}  {key}: {detail}")
