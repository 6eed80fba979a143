"""Image and text embedders.

The image side is a small convolutional stack followed by a bidirectional
LSTM, mapping a ``1 x 32 x 256`` raster to ``s_i`` slice features of width
``d_i``. The text side is a lookup into a learnable character table.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from . import tensor as tn
from .tensor import ConfigurationError, Tensor

PAD = "*"
IAM_ALPHABET = "abcdefghijklmnopqrstuvwxyz-'*"
DIGIT_ALPHABET = "0123456789*"


class InputError(ValueError):
    """Raw input (text or image) violates the embedder's preconditions."""


@dataclass(frozen=True)
class Alphabet:
    """Ordered character set containing the pad character exactly once."""

    chars: str

    def __post_init__(self):
        if self.chars.count(PAD) != 1:
            raise ValueError(f"alphabet must contain the pad character {PAD!r} exactly once")
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("alphabet characters must be distinct")

    @property
    def pad_index(self) -> int:
        return self.chars.index(PAD)

    def index(self, ch: str) -> int:
        return self._lookup[ch]

    @cached_property
    def _lookup(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.chars)}

    def symbols(self) -> str:
        """Characters usable in text, i.e. everything but the pad."""
        return self.chars.replace(PAD, "")

    def __len__(self) -> int:
        return len(self.chars)

    def __contains__(self, ch: str) -> bool:
        return ch in self.chars


@dataclass(frozen=True)
class EncodedText:
    indices: tuple[int, ...]
    pad_mask: tuple[bool, ...]
    original_length: int


@dataclass
class TextEmbedding:
    T: Tensor


@dataclass
class ImageEmbedding:
    J: Tensor


def encode_indices(text: str, alphabet: Alphabet, s_t: int) -> EncodedText:
    lookup = alphabet._lookup
    idx = []
    for pos, ch in enumerate(text):
        if ch not in lookup:
            raise InputError(f"character {ch!r} at position {pos} is not in the alphabet {alphabet.chars!r}")
        idx.append(lookup[ch])
    kept = idx[:s_t]
    n = len(kept)
    indices = tuple(kept) + (alphabet.pad_index,) * (s_t - n)
    mask = (True,) * n + (False,) * (s_t - n)
    return EncodedText(indices, mask, len(text))


def encode_text(text: str, alphabet: Alphabet, s_t: int, T_emb: Tensor) -> tuple[TextEmbedding, EncodedText]:
    """Pad/truncate ``text`` to ``s_t`` and look up its rows in ``T_emb``."""
    enc = encode_indices(text, alphabet, s_t)
    return TextEmbedding(tn.take_rows(T_emb, enc.indices)), enc


def sinusoidal_positions(length: int, dim: int) -> Tensor:
    if dim % 2:
        raise ConfigurationError(f"positional embedding dimension must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return Tensor(table)


add_positions = tn.add_positions


# ---------------------------------------------------------------- image preprocessing


def _resize_axis(img: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == out:
        return img
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1, 1]
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(img, lo, axis=axis) * (1.0 - frac) + np.take(img, hi, axis=axis) * frac


def resize_bilinear(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centres."""
    out = _resize_axis(np.asarray(img, dtype=np.float64), target_h, 0)
    return _resize_axis(out, target_w, 1)


def preprocess_image(raw: np.ndarray, target_h: int = 32, target_w: int = 256) -> Tensor:
    """Resize a grayscale raster and map pixel values [0, 255] to [-1, 1]."""
    img = np.asarray(raw)
    if img.ndim != 2 or img.size == 0:
        raise InputError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    resized = resize_bilinear(img, target_h, target_w)
    return Tensor((resized / 127.5 - 1.0)[None])


# ---------------------------------------------------------------- image encoder


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int = 32
    image_w: int = 256
    s_i: int = 64
    d_i: int = 512
    channels: tuple[int, int, int] = (16, 32, 64)

    def conv_plan(self) -> list[ConvSpec]:
        """Two 4x4 stride-2 blocks, then one block whose kernel spans the
        remaining height and whose horizontal stride yields ``s_i`` slices."""
        c1, c2, c3 = self.channels
        h2 = self.image_h // 4
        w2 = self.image_w // 4
        if w2 % self.s_i:
            raise ConfigurationError(
                f"s_i={self.s_i} does not divide the width {w2} left after two stride-2 blocks"
            )
        ws = w2 // self.s_i
        return [
            ConvSpec(1, c1, (4, 4), (2, 2), (1, 1)),
            ConvSpec(c1, c2, (4, 4), (2, 2), (1, 1)),
            ConvSpec(c2, c3, (max(h2, 1), ws + 2), (1, ws), (0, 1)),
        ]

    def validate(self) -> None:
        if self.d_i % 2:
            raise ConfigurationError(f"d_i must be even for a bidirectional layer, got {self.d_i}")
        h, w = self.image_h, self.image_w
        for spec in self.conv_plan():
            h = tn.conv_output_extent(h, spec.kernel[0], spec.stride[0], spec.padding[0])
            w = tn.conv_output_extent(w, spec.kernel[1], spec.stride[1], spec.padding[1])
        if h != 1:
            raise ConfigurationError(f"conv plan ends at height {h}, not 1")
        if w != self.s_i:
            raise ConfigurationError(f"conv plan ends at width {w}, expected s_i={self.s_i}")


@dataclass
class ConvBlock:
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class LstmWeights:
    w_in: Tensor
    w_rec: Tensor
    bias: Tensor


@dataclass
class EncoderParams:
    """Learnable image-encoder weights (conv stack, channel scaling, BiLSTM)."""

    config: EncoderConfig
    blocks: list[ConvBlock]
    forward_lstm: LstmWeights
    backward_lstm: LstmWeights
    eps: float = 1e-5

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for k, b in enumerate(self.blocks):
            yield f"encoder.conv{k}.weight", b.weight
            yield f"encoder.conv{k}.gamma", b.gamma
            yield f"encoder.conv{k}.beta", b.beta
        for tag, lw in (("fwd", self.forward_lstm), ("bwd", self.backward_lstm)):
            yield f"encoder.lstm_{tag}.w_in", lw.w_in
            yield f"encoder.lstm_{tag}.w_rec", lw.w_rec
            yield f"encoder.lstm_{tag}.bias", lw.bias

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for k, b in enumerate(self.blocks):
            yield f"encoder.conv{k}.running_mean", b.running_mean
            yield f"encoder.conv{k}.running_var", b.running_var


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Sequence[int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    config.validate()
    blocks = []
    for spec in config.conv_plan():
        kh, kw = spec.kernel
        fan_in = spec.c_in * kh * kw
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.c_out, spec.c_in, kh, kw))
        blocks.append(
            ConvBlock(
                weight=Tensor(w, requires_grad=True),
                gamma=Tensor(np.ones(spec.c_out), requires_grad=True),
                beta=Tensor(np.zeros(spec.c_out), requires_grad=True),
                running_mean=np.zeros(spec.c_out),
                running_var=np.ones(spec.c_out),
            )
        )
    feat = config.channels[-1]
    hidden = config.d_i // 2

    def lstm_weights():
        return LstmWeights(
            w_in=Tensor(xavier(rng, feat, 4 * hidden, (feat, 4 * hidden)), requires_grad=True),
            w_rec=Tensor(xavier(rng, hidden, 4 * hidden, (hidden, 4 * hidden)), requires_grad=True),
            bias=Tensor(np.zeros(4 * hidden), requires_grad=True),
        )

    return EncoderParams(config, blocks, lstm_weights(), lstm_weights())


def _conv_features(img: Tensor, params: EncoderParams, collect: list | None = None) -> Tensor:
    x = img
    for spec, block in zip(params.config.conv_plan(), params.blocks):
        x = tn.conv2d(x, block.weight, stride=spec.stride, padding=spec.padding)
        if collect is not None:
            collect.append(x.data)
        # channel scaling with frozen statistics, affine in x
        inv_std = Tensor(1.0 / np.sqrt(block.running_var + params.eps))
        gain = tn.mul(block.gamma, inv_std)
        shift = tn.sub(block.beta, tn.mul(gain, Tensor(block.running_mean)))
        x = tn.add(tn.mul(x, tn.reshape(gain, (-1, 1, 1))), tn.reshape(shift, (-1, 1, 1)))
        x = tn.relu(x)
    return x


def calibrate_statistics(params: EncoderParams, images: np.ndarray) -> None:
    """Set each block's frozen channel statistics from a batch of images.

    Statistics are estimated block by block, so each block sees inputs
    already normalised by the blocks before it.
    """
    for block in params.blocks:
        block.running_mean[:] = 0.0
        block.running_var[:] = 1.0
    for k, block in enumerate(params.blocks):
        acts: list[np.ndarray] = []
        _conv_features(Tensor(images), params, collect=acts)
        a = acts[k]
        block.running_mean[:] = a.mean(axis=(0, 2, 3))
        block.running_var[:] = a.var(axis=(0, 2, 3))


def encode_image_batch(images: Tensor, params: EncoderParams) -> Tensor:
    """Embed a batch ``(n, 1, h, w)`` of preprocessed images to ``(n, s_i, d_i)``."""
    cfg = params.config
    if images.ndim != 4 or images.shape[1:] != (1, cfg.image_h, cfg.image_w):
        raise tn.ShapeError(
            f"expected images of shape (n, 1, {cfg.image_h}, {cfg.image_w}), got {images.shape}"
        )
    feats = _conv_features(images, params)  # n, c, 1, s_i
    n, c = feats.shape[:2]
    seq = tn.transpose(tn.reshape(feats, (n, c, cfg.s_i)), (0, 2, 1))
    fw, bw = params.forward_lstm, params.backward_lstm
    h_fwd = tn.lstm(seq, fw.w_in, fw.w_rec, fw.bias)
    h_bwd = tn.lstm(seq, bw.w_in, bw.w_rec, bw.bias, reverse=True)
    return tn.concat([h_fwd, h_bwd], axis=-1)


def encode_image(img: Tensor, params: EncoderParams) -> ImageEmbedding:
    """Embed one preprocessed ``(1, h, w)`` image to ``J`` of shape ``(s_i, d_i)``."""
    batch = tn.reshape(img, (1,) + tuple(img.shape))
    J = encode_image_batch(batch, params)
    return ImageEmbedding(tn.reshape(J, J.shape[1:]))
