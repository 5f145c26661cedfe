"""Multi-level feature attention network for malicious URL detection."""
from .adversarial import AttackRecord, build_adversarial_testset, insert_hyphens, tag_domain_subwords
from .data import UrlRecord, load_dataset, save_dataset, split, tld_stats
from .encoder import DualChannelEncoder, EncoderConfig, collate
from .estimator import PMAClassifier
from .exceptions import PMAError
from .metrics import Metrics, compute_metrics, rank_auc, roc_points
from .model import ModelConfig, PMANet
from .synthetic import synthetic_corpus
from .tokenizer import Vocab, decode, encode, train_bpe
from .training import PRESETS, EncodedDataset, TrainConfig, evaluate, fit, layer_ablation

__version__ = "0.1.0"

__all__ = [
    "AttackRecord", "DualChannelEncoder", "EncodedDataset", "EncoderConfig", "Metrics", "ModelConfig",
    "PMAClassifier", "PMAError", "PMANet", "PRESETS", "TrainConfig", "UrlRecord", "Vocab",
    "build_adversarial_testset", "collate", "compute_metrics", "decode", "encode", "evaluate", "fit",
    "insert_hyphens", "layer_ablation", "load_dataset", "rank_auc", "roc_points", "save_dataset", "split",
    "synthetic_corpus", "tag_domain_subwords", "tld_stats", "train_bpe",
]
