"""Cross-attention scoring head, the average-embedding baseline, and thresholding.

For one image/text pair with position-augmented embeddings ``J`` (slices x
features) and ``T`` (characters x features)::

    A      = softmax_rows((T Q_t) (J K_i)^T)           # characters x slices
    C      = rownorm(T V_t) rownorm(J V_i)^T            # cosines
    C_att  = sum_j C[:, j] * A[:, j]
    score  = sum of C_att over real characters (optionally / their count)

Every function here also accepts a leading batch axis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tn
from .embedders import (
    Alphabet,
    EncoderConfig,
    EncoderParams,
    ImageEmbedding,
    TextEmbedding,
    encode_image_batch,
    init_encoder,
    sinusoidal_positions,
    xavier,
)
from .tensor import ConfigurationError, ShapeError, Tensor

REDUCTIONS = ("mean", "sum")
MODELS = ("textmatcher", "naive")


@dataclass(frozen=True)
class ModelConfig:
    alphabet: str
    s_t: int = 24
    s_i: int = 64
    d_i: int = 512
    d_t: int = 512
    d_att: int = 512
    channels: tuple[int, int, int] = (16, 32, 64)
    image_h: int = 32
    image_w: int = 256
    model: str = "textmatcher"
    # None means sqrt(d_t); a unit-gain table is swamped by the positional code
    text_embedding_gain: float | None = None

    @property
    def embedding_gain(self) -> float:
        return math.sqrt(self.d_t) if self.text_embedding_gain is None else float(self.text_embedding_gain)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_h, self.image_w, self.s_i, self.d_i, tuple(self.channels))

    def validate(self) -> None:
        Alphabet(self.alphabet)
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.model == "naive" and self.d_i != self.d_t:
            raise ConfigurationError("the naive baseline needs d_i == d_t")
        for name in ("s_t", "s_i", "d_i", "d_t", "d_att"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        self.encoder_config().validate()


@dataclass
class MatcherParams:
    """Every learnable symbol of the model plus the frozen positional tables."""

    config: ModelConfig
    Q_t: Tensor
    K_i: Tensor
    V_t: Tensor
    V_i: Tensor
    T_emb: Tensor
    pos_t: Tensor
    pos_i: Tensor
    encoder: EncoderParams
    tau: float | None = None

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "Q_t", self.Q_t
        yield "K_i", self.K_i
        yield "V_t", self.V_t
        yield "V_i", self.V_i
        yield "T_emb", self.T_emb
        yield "pos_t", self.pos_t
        yield "pos_i", self.pos_i
        yield from self.encoder.named_tensors()

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(self.config.alphabet)


def init_params(config: ModelConfig, seed: int) -> MatcherParams:
    config.validate()
    rng = np.random.default_rng(seed)
    n_chars = len(config.alphabet)

    def proj(d_in):
        return Tensor(xavier(rng, d_in, config.d_att, (d_in, config.d_att)), requires_grad=True)

    return MatcherParams(
        config=config,
        Q_t=proj(config.d_t),
        K_i=proj(config.d_i),
        V_t=proj(config.d_t),
        V_i=proj(config.d_i),
        T_emb=Tensor(config.embedding_gain * xavier(rng, n_chars, config.d_t, (n_chars, config.d_t)), requires_grad=True),
        pos_t=sinusoidal_positions(config.s_t, config.d_t),
        pos_i=sinusoidal_positions(config.s_i, config.d_i),
        encoder=init_encoder(config.encoder_config(), rng),
    )


@dataclass
class AttentionOutput:
    A: Tensor
    C: Tensor
    C_att: Tensor
    scores: Tensor
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=bool))

    @property
    def score(self) -> float:
        return self.scores.item()


def _unwrap(x):
    if isinstance(x, ImageEmbedding):
        return x.J
    if isinstance(x, TextEmbedding):
        return x.T
    return x


def _mask_tensor(pad_mask, shape) -> tuple[Tensor, np.ndarray]:
    mask = np.asarray(pad_mask, dtype=np.float64)
    if mask.shape != shape:
        raise ShapeError(f"pad mask of shape {mask.shape} does not match text rows {shape}")
    return Tensor(mask), mask.sum(axis=-1)


def cross_attention_score(J, T, pad_mask, params: MatcherParams, reduction: str = "mean") -> AttentionOutput:
    """Score position-augmented embeddings ``J`` and ``T`` against each other.

    A text without any real character scores 0 and is flagged in
    ``degenerate`` rather than raising.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    J, T = _unwrap(J), _unwrap(T)
    if J.shape[-1] != params.K_i.shape[0] or T.shape[-1] != params.Q_t.shape[0]:
        raise ShapeError(f"embeddings {J.shape}, {T.shape} do not fit the projection matrices")
    if J.ndim != T.ndim:
        raise ShapeError(f"image embedding {J.shape} and text embedding {T.shape} differ in rank")
    Q = tn.matmul(T, params.Q_t)
    K = tn.matmul(J, params.K_i)
    A = tn.softmax_rows(tn.matmul(Q, tn.swap_last(K)))
    v_text = tn.l2_normalize_rows(tn.matmul(T, params.V_t))
    v_image = tn.l2_normalize_rows(tn.matmul(J, params.V_i))
    C = tn.matmul(v_text, tn.swap_last(v_image))
    C_att = tn.sum(tn.mul(C, A), axis=-1)
    mask, counts = _mask_tensor(pad_mask, C_att.shape)
    total = tn.sum(tn.mul(C_att, mask), axis=-1)
    degenerate = np.atleast_1d(counts == 0)
    if degenerate.any():
        warnings.warn("text without real characters scored as 0", RuntimeWarning, stacklevel=2)
    if reduction == "mean":
        total = tn.mul(total, Tensor(1.0 / np.maximum(counts, 1.0)))
    return AttentionOutput(A, C, C_att, total, degenerate)


def naive_scores(J, T, pad_mask) -> Tensor:
    """Cosine between the real-character mean of ``T`` and the mean of ``J``."""
    J, T = _unwrap(J), _unwrap(T)
    if J.shape[-1] != T.shape[-1]:
        raise ShapeError(f"naive score needs equal feature widths, got {J.shape} and {T.shape}")
    mask = np.asarray(pad_mask, dtype=np.float64)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("naive score is undefined for a text made only of padding")
    t_avg = tn.mul(tn.sum(tn.mul(T, Tensor(mask[..., None])), axis=-2), Tensor(1.0 / counts))
    j_avg = tn.mean(J, axis=-2)
    # zero-norm averages normalise to zero, giving cosine 0
    return tn.sum(tn.mul(tn.l2_normalize_rows(t_avg), tn.l2_normalize_rows(j_avg)), axis=-1)


def naive_match_score(J, T, pad_mask) -> float:
    return naive_scores(J, T, pad_mask).item()


def classify(score: float, tau: float) -> int:
    return 1 if score >= tau else 0


# ---------------------------------------------------------------- end-to-end forward


def text_rows(params: MatcherParams, indices) -> Tensor:
    """Position-augmented text embeddings for an index array ``(..., s_t)``."""
    return tn.add_positions(tn.take_rows(params.T_emb, indices), params.pos_t)


def image_rows(params: MatcherParams, images: Tensor) -> Tensor:
    """Position-augmented image embeddings for preprocessed ``(n, 1, h, w)`` images."""
    return tn.add_positions(encode_image_batch(images, params.encoder), params.pos_i)


def forward_scores(params: MatcherParams, images: Tensor, indices, pad_mask, reduction: str = "mean") -> Tensor:
    """Batch scores from raw inputs, dispatching on the configured model."""
    J = image_rows(params, images)
    T = text_rows(params, indices)
    if params.config.model == "naive":
        return naive_scores(J, T, pad_mask)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return cross_attention_score(J, T, pad_mask, params, reduction).scores


def forward_attention(params: MatcherParams, image: Tensor, indices, pad_mask, reduction: str = "mean") -> AttentionOutput:
    """Full attention diagnostics for a single preprocessed ``(1, h, w)`` image."""
    J = image_rows(params, tn.reshape(image, (1,) + tuple(image.shape)))
    J = tn.reshape(J, J.shape[1:])
    T = text_rows(params, np.asarray(indices))
    return cross_attention_score(J, T, np.asarray(pad_mask), params, reduction)


def attention_csv(A: Tensor) -> str:
    """Attention matrix as CSV: one line per character, one column per slice."""
    rows = np.asarray(A.data)
    if rows.ndim != 2:
        raise ShapeError(f"expected a single attention matrix, got shape {rows.shape}")
    return "".join(",".join(repr(float(v)) for v in r) + "\n" for r in rows)
