"""Loss, batching, the training loop with best-validation-loss selection,
evaluation and the layer-count ablation harness."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np
import torch

from . import numeric as ops
from .data import UrlRecord
from .encoder import collate
from .exceptions import DataEmpty, DivergenceDetected, NonFiniteValue
from .metrics import Metrics, compute_metrics, compute_multiclass_metrics
from .model import ModelConfig, PMANet
from .tokenizer import DEFAULT_MAX_LEN, TokenSequence, Vocab, encode

log = logging.getLogger(__name__)

PAPER_PRESET = dict(
    batch_size=64, lr=2e-5, weight_decay=1e-4, epochs=5, dropout=0.1, max_len=200,
    n_layers=12, hidden_size=768, n_heads=12, gru_hidden=192, char_dim=64,
)
DESK_PRESET = dict(PAPER_PRESET, lr=1e-3, hidden_size=64, n_heads=4, gru_hidden=32, char_dim=32)
PRESETS = {"paper": PAPER_PRESET, "desk": DESK_PRESET}


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 2e-5
    weight_decay: float = 1e-4
    epochs: int = 5
    seed: int = 0
    evals_per_epoch: int = 1
    eval_every: int | None = None  # steps; overrides evals_per_epoch
    precision: str = "float32"
    class_weight: Sequence[float] | None = None
    max_steps: int | None = None
    eval_batch_size: int = 256
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.evals_per_epoch < 1:
            raise ValueError("evals_per_epoch must be >= 1")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr}")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError(f"weight_decay must be finite and >= 0, got {self.weight_decay}")


@dataclass
class EncodedDataset:
    seqs: list[TokenSequence]
    labels: np.ndarray
    urls: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.seqs)

    @classmethod
    def from_records(cls, records: Sequence[UrlRecord], vocab: Vocab, max_len: int = DEFAULT_MAX_LEN):
        return cls.from_urls([r.url for r in records], [r.label for r in records], vocab, max_len)

    @classmethod
    def from_urls(cls, urls: Sequence[str], labels, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN):
        seqs = [encode(u, vocab, max_len) for u in urls]
        if labels is None:
            labels = np.zeros(len(seqs), dtype=np.int64)
        return cls(seqs, np.asarray(labels, dtype=np.int64), list(urls))

    def batch(self, idx):
        return collate([self.seqs[i] for i in idx], self.labels[idx])


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_index: int | None = None

    @property
    def best(self) -> dict | None:
        return None if self.best_index is None else self.evals[self.best_index]

    def record_eval(self, entry: dict) -> bool:
        """Append ``entry``; True when it is the new minimum validation loss."""
        self.evals.append(entry)
        if self.best_index is None or entry["val_loss"] < self.evals[self.best_index]["val_loss"]:
            self.best_index = len(self.evals) - 1
            return True
        return False

    def to_dict(self) -> dict:
        return {"steps": self.steps, "evals": self.evals, "best_index": self.best_index}


@dataclass
class EvalResult:
    metrics: Metrics
    scores: np.ndarray
    probabilities: np.ndarray
    loss: float


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, class_weight=None) -> torch.Tensor:
    weight = None if class_weight is None else torch.as_tensor(class_weight, dtype=logits.dtype)
    return ops.cross_entropy_with_logits(logits, labels, weight)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _eval_steps(spe: int, cfg: TrainConfig) -> set[int]:
    """Within-epoch step numbers (1-based) after which validation runs."""
    if cfg.eval_every:
        return set()
    k = min(cfg.evals_per_epoch, spe)
    return {max(1, (j * spe) // k) for j in range(1, k + 1)}


@torch.no_grad()
def _forward_all(model: PMANet, dataset: EncodedDataset, batch_size: int, with_loss: bool):
    was_training = model.training
    model.eval()
    probs, total = [], 0.0
    try:
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            batch = dataset.batch(idx)
            out = model(batch)
            if with_loss:
                total += float(cross_entropy(out.logits, batch.labels)) * len(idx)
            probs.append(out.probabilities.double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(probs), total / len(dataset)


def predict_proba(model: PMANet, dataset: EncodedDataset, batch_size: int = 256) -> np.ndarray:
    """Class probabilities, shape (n, K), in eval mode."""
    if len(dataset) == 0:
        raise DataEmpty("nothing to predict")
    return _forward_all(model, dataset, batch_size, with_loss=False)[0]


def malicious_score(probabilities: np.ndarray) -> np.ndarray:
    """P(malicious) for two classes, 1 - P(benign) otherwise."""
    p = np.asarray(probabilities)
    return p[:, 1] if p.shape[1] == 2 else 1.0 - p[:, 0]


def evaluate(model: PMANet, dataset: EncodedDataset, batch_size: int = 256, threshold: float = 0.5,
             class_names=None) -> EvalResult:
    """Eval-mode scores, metrics and mean loss over ``dataset``."""
    if len(dataset) == 0:
        raise DataEmpty("evaluation set is empty")
    p, loss = _forward_all(model, dataset, batch_size, with_loss=True)
    scores = malicious_score(p)
    if p.shape[1] == 2:
        metrics = compute_metrics(scores, dataset.labels, threshold)
    else:
        metrics = compute_multiclass_metrics(p, dataset.labels, class_names)
    return EvalResult(metrics, scores, p, loss)


def fit(model: PMANet, train: EncodedDataset, val: EncodedDataset, cfg: TrainConfig,
        out_dir=None, checkpoint_meta: dict | None = None, log_stream: TextIO | None = None,
        on_eval: Callable[[dict], None] | None = None) -> TrainLog:
    """Train with AdamW on shuffled mini-batches, validating on schedule.

    The parameters with the lowest validation loss are restored into
    ``model`` at the end and, with ``out_dir``, written to ``best.ckpt``
    whenever a new best appears. ``train.log`` gets one ``step epoch loss lr``
    line per step and ``val_metrics.jsonl`` one JSON record per validation.
    """
    if len(train) == 0:
        raise DataEmpty("training set is empty")
    if len(val) == 0:
        raise DataEmpty("validation set is empty")
    model.to(ops.resolve_dtype(cfg.precision))
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = ops.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay) if params else None
    out = Path(out_dir) if out_dir is not None else None
    log_fh = metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train.log", "w", encoding="utf-8")
        log_fh.write("# step epoch loss lr\n")
        metrics_fh = open(out / "val_metrics.jsonl", "w", encoding="utf-8")

    trainlog = TrainLog()
    best_state = model.state_tensors()
    spe = steps_per_epoch(len(train), cfg.batch_size)
    eval_at = _eval_steps(spe, cfg)
    base = ops.Rng(cfg.seed)
    step = 0

    def validate(epoch: int):
        result = evaluate(model, val, cfg.eval_batch_size)
        entry = {"step": step, "epoch": epoch, "val_loss": result.loss, "metrics": result.metrics.to_dict()}
        if trainlog.record_eval(entry):
            best_state.update(model.state_tensors())
            if out is not None:
                model.save(out / "best.ckpt", dict(checkpoint_meta or {}, best_step=step))
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            metrics_fh.flush()
        if on_eval is not None:
            on_eval(entry)
        log.info("step %d epoch %d val_loss %.5f auc %.4f", step, epoch, result.loss, result.metrics.auc)

    try:
        model.train()
        done = False
        for epoch in range(cfg.epochs):
            order = base.child("shuffle", epoch).permutation(len(train))
            for i in range(spe):
                idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
                batch = train.batch(idx)
                model.set_rng(base.child("dropout", step))
                try:
                    logits = model(batch).logits
                    loss = cross_entropy(logits, batch.labels, cfg.class_weight)
                except NonFiniteValue as exc:
                    raise DivergenceDetected(f"step {step}: {exc}") from exc
                if optimizer is not None:
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    try:
                        optimizer.step()
                    except RuntimeError as exc:
                        # lr too large for the parameter dtype
                        raise DivergenceDetected(f"step {step}: optimizer update failed: {exc}") from exc
                step += 1
                value = loss.item()
                trainlog.steps.append({"step": step, "epoch": epoch, "loss": value, "lr": cfg.lr})
                if log_fh is not None:
                    log_fh.write(f"{step} {epoch} {value!r} {cfg.lr!r}\n")
                if log_stream is not None:
                    log_stream.write(f"step {step} loss {value:.6f} lr {cfg.lr:g}\n")
                if (cfg.eval_every and step % cfg.eval_every == 0) or (i + 1) in eval_at:
                    validate(epoch)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break
            if done:
                break
        if not trainlog.evals or trainlog.evals[-1]["step"] != step:
            validate(epoch)
    finally:
        model.set_rng(None)
        for fh in (log_fh, metrics_fh):
            if fh is not None:
                fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return trainlog


# --------------------------------------------------------------------------
# Layer-count ablation

ABLATION_COLUMNS = ("accuracy", "precision", "recall", "f1", "auc")


def layer_ablation(train: EncodedDataset, val: EncodedDataset, test: EncodedDataset, model_cfg: ModelConfig,
                   train_cfg: TrainConfig, layer_counts=(2, 3, 4, 5, 12), selection: str = "last",
                   out_dir=None) -> list[dict]:
    """One fit + test evaluation per layer count; the encoder always has
    ``model_cfg.encoder.n_layers`` layers and only the stacked subset varies."""
    rows = []
    for k in layer_counts:
        cfg = replace(model_cfg, layer_count=int(k), layer_selection=selection)
        model = PMANet(cfg, seed=train_cfg.seed)
        run_dir = None if out_dir is None else Path(out_dir) / f"layers_{k}"
        trainlog = fit(model, train, val, train_cfg, out_dir=run_dir)
        result = evaluate(model, test, train_cfg.eval_batch_size)
        m = result.metrics
        row = {"layers": int(k), **{c: getattr(m, c) for c in ABLATION_COLUMNS}}
        row["best_val_loss"] = trainlog.best["val_loss"]
        rows.append(row)
        log.info("ablation layers=%d %s", k, row)
    return rows


def ablation_trend(rows: list[dict], column: str = "accuracy") -> str:
    """'increasing', 'decreasing' or 'mixed' as layer count grows."""
    values = [r[column] for r in sorted(rows, key=lambda r: r["layers"])]
    diffs = np.diff(values)
    if np.all(diffs >= 0):
        return "increasing"
    if np.all(diffs <= 0):
        return "decreasing"
    return "mixed"


def ablation_table(rows: list[dict]) -> str:
    header = "layers," + ",".join(ABLATION_COLUMNS)
    lines = [header] + [f"{r['layers']}," + ",".join(f"{r[c]:.4f}" for c in ABLATION_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
