"""scikit-learn style wrapper: URLs in, class probabilities out."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import UrlRecord, split
from .encoder import EncoderConfig
from .exceptions import UnknownLabel
from .model import ModelConfig, PMANet
from .tokenizer import DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE, Vocab, train_bpe
from .training import PRESETS, EncodedDataset, TrainConfig, TrainLog, config_dict, fit, predict_proba

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "pma-classifier"


def check_urls(X, name: str = "X") -> list[str]:
    """A 1-D sequence of non-empty URL strings."""
    if isinstance(X, (str, bytes)):
        raise TypeError(f"{name} must be a sequence of URLs, not a single string")
    arr = np.asarray(X, dtype=object)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    out = []
    for i, u in enumerate(arr):
        if not isinstance(u, str):
            raise TypeError(f"{name}[{i}] is {type(u).__name__}, expected str")
        if not u.strip():
            raise ValueError(f"{name}[{i}] is an empty URL")
        out.append(u.strip())
    return out


def check_labels(y, n: int, name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.shape[0] != n:
        raise ValueError(f"{name} has {arr.shape[0]} entries for {n} URLs")
    return arr


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


class PMAClassifier(ClassifierMixin, BaseEstimator):
    """Malicious-URL classifier. ``None`` hyperparameters take the preset value.

    Parameters mirror the encoder and training settings; ``preset`` is
    ``"desk"`` (narrow, lr 1e-3) or ``"paper"`` (768 wide, lr 2e-5).
    """

    def __init__(self, preset: str = "desk", seed: int = 0, vocab_size: int = DEFAULT_VOCAB_SIZE,
                 max_len: int = DEFAULT_MAX_LEN, epochs=None, batch_size=None, lr=None, weight_decay=None,
                 dropout=None, n_layers=None, hidden_size=None, n_heads=None, gru_hidden=None, char_dim=None,
                 levels=(1, 2, 4), reduction: int = 3, layer_count=None, layer_selection: str = "last",
                 evals_per_epoch: int = 1, eval_every=None, max_steps=None, precision: str = "float32",
                 val_fraction: float = 0.1, threshold: float = 0.5, class_weight=None):
        self.preset = preset
        self.seed = seed
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.n_layers = n_layers
        self.hidden_size = hidden_size
        self.n_heads = n_heads
        self.gru_hidden = gru_hidden
        self.char_dim = char_dim
        self.levels = levels
        self.reduction = reduction
        self.layer_count = layer_count
        self.layer_selection = layer_selection
        self.evals_per_epoch = evals_per_epoch
        self.eval_every = eval_every
        self.max_steps = max_steps
        self.precision = precision
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.class_weight = class_weight

    # ------------------------------------------------------------------
    # configuration

    def resolved(self) -> dict:
        """Preset values overlaid with every explicitly set hyperparameter."""
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
        out = dict(PRESETS[self.preset])
        for key in out:
            value = getattr(self, key, None)
            if value is not None:
                out[key] = value
        return out

    def model_config(self, vocab: Vocab, n_classes: int) -> ModelConfig:
        s = self.resolved()
        enc = EncoderConfig(
            vocab_size=vocab.size, char_vocab_size=vocab.char_size, n_layers=s["n_layers"],
            hidden_size=s["hidden_size"], n_heads=s["n_heads"], gru_hidden=s["gru_hidden"],
            char_dim=s["char_dim"], dropout=s["dropout"], max_positions=s["max_len"],
        )
        return ModelConfig(enc, n_classes=n_classes, levels=tuple(self.levels), reduction=self.reduction,
                           layer_count=self.layer_count, layer_selection=self.layer_selection)

    def train_config(self) -> TrainConfig:
        s = self.resolved()
        return TrainConfig(
            batch_size=s["batch_size"], lr=s["lr"], weight_decay=s["weight_decay"], epochs=s["epochs"],
            seed=self.seed, evals_per_epoch=self.evals_per_epoch, eval_every=self.eval_every,
            precision=self.precision, class_weight=self.class_weight, max_steps=self.max_steps,
        )

    # ------------------------------------------------------------------
    # sklearn API

    def _encode_labels(self, y) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes_.tolist())}
        try:
            return np.array([lookup[_plain(v)] for v in y], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLabel(f"label {exc.args[0]!r} not seen during fit") from None

    def fit(self, X, y, X_val=None, y_val=None, vocab: Vocab | None = None, out_dir=None, log_stream=None):
        """Train on ``X``; without ``X_val`` a stratified ``val_fraction`` is held out.

        The tokenizer is trained on the training URLs only unless ``vocab``
        is supplied.
        """
        X = check_urls(X)
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("fit needs at least two classes")
        y_enc = self._encode_labels(y)
        if X_val is None:
            recs = [UrlRecord(u, int(c)) for u, c in zip(X, y_enc)]
            n_val = max(1, int(round(len(recs) * self.val_fraction)))
            val_recs, train_recs = split(recs, [n_val, len(recs) - n_val], seed=self.seed)
            X, y_enc = [r.url for r in train_recs], np.array([r.label for r in train_recs])
            X_val, yv_enc = [r.url for r in val_recs], np.array([r.label for r in val_recs])
        else:
            X_val = check_urls(X_val, "X_val")
            yv_enc = self._encode_labels(check_labels(y_val, len(X_val), "y_val"))

        self.vocab_ = vocab if vocab is not None else train_bpe(X, self.vocab_size)
        max_len = self.resolved()["max_len"]
        train = EncodedDataset.from_urls(X, y_enc, self.vocab_, max_len)
        val = EncodedDataset.from_urls(X_val, yv_enc, self.vocab_, max_len)
        cfg = self.model_config(self.vocab_, len(self.classes_))
        self.model_ = PMANet(cfg, seed=self.seed)
        self.train_log_: TrainLog = fit(self.model_, train, val, self.train_config(), out_dir=out_dir,
                                        checkpoint_meta=self.checkpoint_meta(), log_stream=log_stream)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_urls(X)
        ds = EncodedDataset.from_urls(X, None, self.vocab_, self.model_.cfg.encoder.max_positions)
        return predict_proba(self.model_, ds)

    def decision_scores(self, X) -> np.ndarray:
        """Malicious-class probability (1 - P(first class) with more than two classes)."""
        p = self.predict_proba(X)
        return p[:, 1] if p.shape[1] == 2 else 1.0 - p[:, 0]

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        if p.shape[1] == 2:
            idx = (p[:, 1] >= self.threshold).astype(int)
        else:
            idx = p.argmax(axis=1)
        return self.classes_[idx]

    # ------------------------------------------------------------------
    # persistence

    def checkpoint_meta(self) -> dict:
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        return {
            "kind": CHECKPOINT_KIND,
            "params": params,
            "classes": [_plain(c) for c in self.classes_],
            "vocab": self.vocab_.to_text() if hasattr(self, "vocab_") else None,
            "train_config": config_dict(self.train_config()),
        }

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        return self.model_.save(path, self.checkpoint_meta())

    @classmethod
    def load(cls, path) -> "PMAClassifier":
        model, meta = PMANet.load(path)
        params = dict(meta.get("params") or {})
        if "levels" in params:
            params["levels"] = tuple(params["levels"])
        est = cls(**params)
        est.model_ = model
        est.classes_ = np.array(meta.get("classes") or list(range(model.cfg.n_classes)))
        if meta.get("vocab"):
            est.vocab_ = Vocab.from_text(meta["vocab"])
        return est


def fit_records(clf: PMAClassifier, train: Sequence[UrlRecord], val: Sequence[UrlRecord] | None = None, **kw):
    """Fit on dataset records, keeping integer labels as the classes."""
    X_val = y_val = None
    if val is not None:
        X_val, y_val = [r.url for r in val], [r.label for r in val]
    return clf.fit([r.url for r in train], [r.label for r in train], X_val, y_val, **kw)
