"""Matching word images against candidate texts with cross-attention."""

from .datagen import DatasetManifest, DatasetSpec, build_dataset, normalize_date
from .embedders import Alphabet, encode_image, encode_text
from .matcher import ModelConfig, MatcherParams, cross_attention_score, init_params, naive_match_score
from .metrics import EvalReport, ScoredSample, confusion_metrics, select_threshold
from .training import TrainConfig, contrastive_loss, load_checkpoint, save_checkpoint, train

__all__ = [
    "Alphabet",
    "DatasetManifest",
    "DatasetSpec",
    "EvalReport",
    "MatcherParams",
    "ModelConfig",
    "ScoredSample",
    "TrainConfig",
    "build_dataset",
    "confusion_metrics",
    "contrastive_loss",
    "cross_attention_score",
    "encode_image",
    "encode_text",
    "init_params",
    "load_checkpoint",
    "naive_match_score",
    "normalize_date",
    "save_checkpoint",
    "select_threshold",
    "train",
]
