"""``pma`` command line: vocab/model training, prediction, evaluation,
adversarial generation, dataset statistics and the layer ablation."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .adversarial import build_adversarial_testset
from .data import SCHEMAS, get_schema, load_dataset, save_dataset, split, tld_stats
from .estimator import PMAClassifier, fit_records
from .exceptions import DivergenceDetected, NonFiniteValue, PMAError
from .metrics import roc_points
from .synthetic import synthetic_corpus
from .tokenizer import Vocab, train_bpe
from .training import PRESETS, EncodedDataset, ablation_table, ablation_trend, evaluate, layer_ablation

log = logging.getLogger("pmanet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad command-line input; exit code 2."""


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise InputError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip().replace("-", "_")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(value, list):
        value = tuple(value)
    return key, value


def make_classifier(args) -> PMAClassifier:
    clf = PMAClassifier(preset=args.preset, seed=args.seed)
    valid = clf.get_params()
    overrides = dict(parse_override(o) for o in args.override or [])
    for key in overrides:
        if key not in valid:
            raise InputError(f"unknown override {key!r}; valid keys: {', '.join(sorted(valid))}")
    clf.set_params(**overrides)
    clf.resolved()
    return clf


def _require(path, flag: str) -> Path:
    if path is None:
        raise InputError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{flag}: file not found: {p}")
    return p


def _schema(args):
    schema = get_schema(args.schema)
    return schema.with_columns(args.url_column, args.label_column)


def _load(args, path, flag):
    return load_dataset(_require(path, flag), _schema(args))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _vocab(args, train_records=None, out_dir: Path | None = None) -> Vocab:
    if args.vocab and not getattr(args, "train_vocab", False):
        return Vocab.load(_require(args.vocab, "--vocab"))
    if train_records is None:
        raise InputError("--vocab is required (or --train-vocab with --data)")
    size = getattr(args, "vocab_size", None) or 4096
    vocab = train_bpe([r.url for r in train_records], size)
    target = Path(args.vocab) if args.vocab else (out_dir / "vocab.txt" if out_dir else None)
    if target is not None:
        vocab.save(target)
    return vocab


def _load_model(args) -> PMAClassifier:
    clf = PMAClassifier.load(_require(args.checkpoint, "--checkpoint"))
    if args.vocab:
        clf.vocab_ = Vocab.load(_require(args.vocab, "--vocab"))
    if not hasattr(clf, "vocab_"):
        raise InputError(f"{args.checkpoint} carries no vocabulary; pass --vocab")
    return clf


# ----------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    out = Path(args.out_dir)
    train = _load(args, args.data, "--data")
    val = _load(args, args.val, "--val") if args.val else None
    if val is None:
        n_val = max(1, round(0.1 * len(train)))
        val, train = split(train, [n_val, len(train) - n_val], seed=args.seed)
    clf = make_classifier(args)
    vocab = _vocab(args, train, out)
    out.mkdir(parents=True, exist_ok=True)
    fit_records(clf, train, val, vocab=vocab, out_dir=out,
                log_stream=sys.stderr if args.verbose else None)
    trainlog = clf.train_log_
    _write_json(out / "trainlog.json", trainlog.to_dict())
    best = trainlog.best
    _write_json(out / "metrics.json", dict(best["metrics"], val_loss=best["val_loss"], step=best["step"]))
    print(json.dumps({"checkpoint": str(out / "best.ckpt"), "val_loss": best["val_loss"],
                      "auc": best["metrics"]["auc"]}, sort_keys=True))
    return EXIT_OK


def _read_urls(args) -> list[str]:
    urls = list(args.urls or [])
    if args.data:
        path = _require(args.data, "--data")
        schema = _schema(args)
        with open(path, newline="", encoding="utf-8", errors="replace") as fh:
            reader = csv.reader(fh, delimiter="\t" if path.suffix.lower() in (".tsv", ".tab") else ",")
            header = next(reader, [])
            if schema.url_column in header:
                i = header.index(schema.url_column)
                urls += [row[i] for row in reader if len(row) > i and row[i].strip()]
            else:
                urls += [row[0] for row in [header, *reader] if row and row[0].strip()]
    if not urls:
        raise InputError("no URLs given (positional URLs or --data)")
    return urls


def cmd_predict(args) -> int:
    clf = _load_model(args)
    urls = _read_urls(args)
    scores = clf.decision_scores(urls)
    labels = clf.predict(urls)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["url", "probability", "label"])
        for u, s, lab in zip(urls, scores, labels):
            writer.writerow([u, f"{s:.8f}", lab])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    clf = _load_model(args)
    test = _load(args, args.test or args.data, "--test")
    ds = EncodedDataset.from_records(test, clf.vocab_, clf.model_.cfg.encoder.max_positions)
    schema = _schema(args)
    result = evaluate(clf.model_, ds, threshold=clf.threshold, class_names=list(schema.classes))
    out = Path(args.out_dir)
    report = result.metrics.to_dict()
    report["n"] = len(test)
    try:
        roc = roc_points(result.scores, (ds.labels != 0).astype(int))
    except PMAError as exc:
        log.warning("no ROC: %s", exc)
        roc = None
    if roc is not None:
        report["tpr_at_fpr"] = {str(x): roc.tpr_at_fpr(x) for x in args.fpr}
        (out / "roc.csv").parent.mkdir(parents=True, exist_ok=True)
        (out / "roc.csv").write_text(roc.to_csv(), encoding="utf-8")
    _write_json(out / "metrics.json", report)
    if args.scores:
        with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["url", "label", "score"])
            for r, s in zip(test, result.scores):
                writer.writerow([r.url, r.label, f"{s:.8f}"])
    print(json.dumps({k: report[k] for k in ("accuracy", "precision", "recall", "f1", "auc", "fpr")}, sort_keys=True))
    return EXIT_OK


def cmd_attack(args) -> int:
    test = _load(args, args.test, "--test")
    train = _load(args, args.data, "--data") if args.data else None
    if args.checkpoint:
        vocab = _load_model(args).vocab_
    else:
        vocab = _vocab(args, train, None)
    adv = build_adversarial_testset(
        test, vocab, seed=args.seed, n_benign=args.n_benign, n_malicious=args.n_malicious,
        n_adversarial=args.n_adversarial, swap_fraction=args.swap_fraction, k=args.k,
        train_urls=[r.url for r in train] if train else (),
    )
    target = Path(args.out) if args.out else Path(args.out_dir) / "adversarial.csv"
    csv_path, side = adv.save(target)
    print(json.dumps({"csv": str(csv_path), "provenance": str(side), "counts": adv.counts,
                      "skipped": adv.skipped}, sort_keys=True))
    return EXIT_OK


def cmd_stats(args) -> int:
    schema = _schema(args)
    records = _load(args, args.data, "--data")
    stats = tld_stats(records, schema.classes)
    _write_json(Path(args.out_dir) / "tld_stats.json", stats.to_dict())
    print(json.dumps(stats.to_dict()["fractions"], sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        counts = [int(x) for x in args.layers.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--layers must be comma-separated integers, got {args.layers!r}") from None
    train = _load(args, args.data, "--data")
    val = _load(args, args.val, "--val")
    test = _load(args, args.test, "--test")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clf = make_classifier(args)
    vocab = _vocab(args, train, out)
    max_len = clf.resolved()["max_len"]
    n_classes = len({r.label for r in train})
    try:
        model_cfg = clf.model_config(vocab, n_classes)
        for k in counts:
            if not 1 <= k <= model_cfg.encoder.n_layers:
                raise ValueError(f"layer count {k} outside [1, {model_cfg.encoder.n_layers}]")
    except ValueError as exc:
        raise InputError(str(exc)) from None
    rows = layer_ablation(
        EncodedDataset.from_records(train, vocab, max_len), EncodedDataset.from_records(val, vocab, max_len),
        EncodedDataset.from_records(test, vocab, max_len), model_cfg, clf.train_config(), counts,
        selection=args.selection, out_dir=out / "runs" if args.keep_runs else None,
    )
    (out / "ablation.csv").write_text(ablation_table(rows), encoding="utf-8")
    _write_json(out / "ablation.json", {"rows": rows, "selection": args.selection,
                                        "trend": {c: ablation_trend(rows, c) for c in ("accuracy", "auc")}})
    sys.stdout.write(ablation_table(rows))
    return EXIT_OK


def cmd_synth(args) -> int:
    records = synthetic_corpus(args.n, seed=args.seed, malicious_fraction=args.malicious_fraction)
    out = Path(args.out_dir)
    if args.split:
        sizes = [int(x) for x in args.split.split(",")]
        if len(sizes) != 3:
            raise InputError("--split takes train,val,test counts")
        names = ("train.csv", "val.csv", "test.csv")
        for name, part in zip(names, split(records, sizes, seed=args.seed)):
            save_dataset(out / name, part)
        print(json.dumps({n: str(out / n) for n in names}, sort_keys=True))
    else:
        path = save_dataset(out / "synthetic.csv", records)
        print(json.dumps({"csv": str(path)}))
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="training CSV (predict: URL list)")
    common.add_argument("--val", help="validation CSV")
    common.add_argument("--test", help="test CSV")
    common.add_argument("--vocab", help="BPE vocabulary file")
    common.add_argument("--checkpoint", help="model checkpoint")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="hyperparameter override, repeatable (e.g. epochs=1)")
    common.add_argument("--out-dir", default="run")
    common.add_argument("--schema", default="grambeddings", choices=sorted(SCHEMAS))
    common.add_argument("--url-column")
    common.add_argument("--label-column")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pma", description="Multi-level feature attention URL classifier")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model; writes <out-dir>/best.ckpt")
    t.add_argument("--train-vocab", action="store_true", help="learn the BPE vocabulary from --data")
    t.add_argument("--vocab-size", type=int, default=4096)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="score URLs; CSV to stdout")
    pr.add_argument("urls", nargs="*")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="metrics.json and roc.csv for --test")
    e.add_argument("--fpr", type=float, action="append", default=None, help="report TPR at this FPR")
    e.add_argument("--scores", action="store_true", help="also write per-URL scores.csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack", parents=[common], help="build the adversarial test set from --test")
    a.add_argument("--n-benign", type=int)
    a.add_argument("--n-malicious", type=int)
    a.add_argument("--n-adversarial", type=int)
    a.add_argument("--swap-fraction", type=float, default=0.5)
    a.add_argument("-k", type=int, default=1, help="hyphens per URL")
    a.add_argument("--vocab-size", type=int, default=4096)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("stats", parents=[common], help="TLD composition per class")
    s.set_defaults(func=cmd_stats)

    ab = sub.add_parser("ablate", parents=[common], help="fit once per stacked-layer count")
    ab.add_argument("--layers", default="2,3,4,5,12")
    ab.add_argument("--selection", default="last", choices=("last", "spaced"))
    ab.add_argument("--vocab-size", type=int, default=4096)
    ab.add_argument("--keep-runs", action="store_true")
    ab.set_defaults(func=cmd_ablate)

    sy = sub.add_parser("synth", parents=[common], help="write a synthetic URL corpus")
    sy.add_argument("--n", type=int, default=14_000)
    sy.add_argument("--malicious-fraction", type=float, default=0.5)
    sy.add_argument("--split", help="train,val,test counts")
    sy.set_defaults(func=cmd_synth)
    return p


def _threads():
    n = os.environ.get("PMA_THREADS")
    if n:
        import torch

        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise InputError(f"PMA_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "fpr", "unset") is None:
        args.fpr = [0.001]
    try:
        _threads()
        return args.func(args)
    except (NonFiniteValue, DivergenceDetected, FloatingPointError) as exc:
        print(f"pma: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, PMAError, FileNotFoundError, ValueError, TypeError) as exc:
        print(f"pma: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
