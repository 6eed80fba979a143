"""Contrastive training of the matcher and binary checkpoints."""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .embedders import Alphabet, calibrate_statistics, encode_indices, preprocess_image
from .matcher import REDUCTIONS, MatcherParams, ModelConfig, forward_scores, init_params
from .metrics import ScoredSample, confusion_metrics, select_threshold
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MAGIC = b"TXMC"
FORMAT_VERSION = 1
CALIBRATION_IMAGES = 64


class TrainingError(RuntimeError):
    """Training diverged or was given unusable data."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable or incompatible."""


@dataclass
class TrainConfig:
    margin: float = 1.0
    alpha: float = 1.0
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 50
    seed: int = 0
    reduction: str = "mean"
    profile: str = "synthetic"
    criterion: str = "f1"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


# ---------------------------------------------------------------- loss


def contrastive_loss(score: float, label: int, m: float = 1.0, alpha: float = 1.0) -> float:
    """``alpha*l*(1-S)^2 + (1-l)*max(m-(1-S), 0)^2``."""
    if m <= 0:
        raise ValueError("margin must be positive")
    if label:
        return alpha * (1.0 - score) ** 2
    return max(m - (1.0 - score), 0.0) ** 2


def contrastive_loss_tensor(scores: Tensor, labels, m: float = 1.0, alpha: float = 1.0) -> Tensor:
    """Mean contrastive loss over a batch of scores (differentiable)."""
    lab = np.asarray(labels, dtype=np.float64).reshape(scores.shape)
    pos = tn.mul(tn.square(tn.sub(1.0, scores)), Tensor(alpha * lab))
    neg = tn.mul(tn.square(tn.relu(tn.add(scores, m - 1.0))), Tensor(1.0 - lab))
    return tn.mean(tn.add(pos, neg))


# ---------------------------------------------------------------- data preparation


@dataclass
class Batchable:
    """Preprocessed, index-encoded samples ready for batching."""

    images: np.ndarray  # n, 1, h, w
    indices: np.ndarray  # n, s_t
    masks: np.ndarray  # n, s_t
    labels: np.ndarray  # n
    meta: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batchable":
        return Batchable(self.images[idx], self.indices[idx], self.masks[idx], self.labels[idx])


def prepare(samples: Sequence, config: ModelConfig) -> Batchable:
    """Preprocess samples (anything with ``image``, ``text``, ``label``, ``meta``)."""
    if not samples:
        raise TrainingError("dataset is empty")
    alphabet = Alphabet(config.alphabet)
    cache: dict[int, np.ndarray] = {}
    images, indices, masks, labels, meta = [], [], [], [], []
    for s in samples:
        key = id(s.image)
        if key not in cache:
            cache[key] = preprocess_image(s.image, config.image_h, config.image_w).data
        images.append(cache[key])
        enc = encode_indices(s.text, alphabet, config.s_t)
        indices.append(enc.indices)
        masks.append(enc.pad_mask)
        labels.append(s.label)
        meta.append(dict(getattr(s, "meta", {}) or {}))
    return Batchable(
        np.stack(images),
        np.asarray(indices, dtype=np.int64),
        np.asarray(masks, dtype=bool),
        np.asarray(labels, dtype=np.int64),
        meta,
    )


def score_batches(params: MatcherParams, data: Batchable, reduction: str = "mean", batch_size: int = 64) -> np.ndarray:
    out = np.empty(len(data))
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = forward_scores(params, Tensor(data.images[sl]), data.indices[sl], data.masks[sl], reduction).data
    return out


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_f1: float | None = None
    tau: float | None = None


def _snapshot(params: MatcherParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named_tensors()}


def _restore(params: MatcherParams, snap: dict[str, np.ndarray]) -> None:
    for name, t in params.named_tensors():
        t.data[...] = snap[name]


def train(
    dataset,
    config: TrainConfig,
    params: MatcherParams,
    validation=None,
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[MatcherParams, list[EpochRecord]]:
    """Mini-batch SGD with momentum on the mean contrastive loss.

    ``dataset`` and ``validation`` are sample sequences or prepared
    :class:`Batchable` data. With a validation set, each epoch picks a
    threshold on it and the parameters of the best-F1 epoch are returned
    (``params.tau`` is set to that epoch's threshold).
    """
    train_data = dataset if isinstance(dataset, Batchable) else prepare(dataset, params.config)
    if len(train_data) == 0:
        raise TrainingError("dataset is empty")
    val_data = None
    if validation is not None:
        val_data = validation if isinstance(validation, Batchable) else prepare(validation, params.config)

    calibrate_statistics(params.encoder, train_data.images[:CALIBRATION_IMAGES])
    trainable = params.trainable()
    state = tn.SgdState(config.learning_rate, config.momentum)
    history: list[EpochRecord] = []
    best: tuple[float, dict, float | None] | None = None
    n = len(train_data)

    for epoch in range(config.max_epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = train_data.take(order[start : start + config.batch_size])
            with Tape() as tape:
                scores = forward_scores(params, Tensor(batch.images), batch.indices, batch.masks, config.reduction)
                loss = contrastive_loss_tensor(scores, batch.labels, config.margin, config.alpha)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            tn.backward(loss, tape)
            tn.sgd_step(trainable, [p.grad for p in trainable], state)
            for p in trainable:
                p.zero_grad()
            total += value * len(batch)
        record = EpochRecord(epoch, total / n)
        if val_data is not None and 0 < val_data.labels.sum() < len(val_data):
            scored = [ScoredSample(float(s), int(l)) for s, l in zip(score_batches(params, val_data, config.reduction), val_data.labels)]
            tau = select_threshold(scored, config.criterion)
            record.tau = tau
            record.val_f1 = confusion_metrics(scored, tau).f1 or 0.0
            if best is None or record.val_f1 > best[0]:
                best = (record.val_f1, _snapshot(params), tau)
        history.append(record)
        log.info("epoch %d loss %.6f val_f1 %s tau %s", epoch, record.loss, record.val_f1, record.tau)
        if progress is not None:
            progress(record)

    if best is not None:
        _restore(params, best[1])
        params.tau = best[2]
    return params, history


# ---------------------------------------------------------------- checkpoints


def config_echo(config: ModelConfig, tau: float | None, extra: dict | None = None) -> str:
    """Canonical ``key=value`` description stored in checkpoints."""
    items = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        items.append((f.name, str(value)))
    items.append(("tau", "none" if tau is None else repr(float(tau))))
    for k in sorted(extra or {}):
        items.append((k, str(extra[k])))
    return "".join(f"{k}={v}\n" for k, v in items)


def parse_echo(text: str) -> tuple[ModelConfig, float | None, dict[str, str]]:
    values = {}
    for line in text.splitlines():
        k, sep, v = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        values[k] = v
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in values:
            raise CheckpointError(f"config echo lacks {f.name!r}")
        raw = values.pop(f.name)
        if f.name == "channels":
            kwargs[f.name] = tuple(int(x) for x in raw.split(","))
        elif f.name in ("alphabet", "model"):
            kwargs[f.name] = raw
        elif f.name == "text_embedding_gain":
            kwargs[f.name] = None if raw == "None" else float(raw)
        else:
            kwargs[f.name] = int(raw)
    tau_raw = values.pop("tau", "none")
    tau = None if tau_raw == "none" else float(tau_raw)
    return ModelConfig(**kwargs), tau, values


def _history_tensors(history: Sequence[EpochRecord]) -> dict[str, np.ndarray]:
    def col(attr):
        return np.array([np.nan if getattr(r, attr) is None else getattr(r, attr) for r in history], dtype=np.float64)

    return {"history.loss": col("loss"), "history.val_f1": col("val_f1"), "history.tau": col("tau")}


def _tensor_records(params: MatcherParams, history: Sequence[EpochRecord]) -> list[tuple[str, np.ndarray]]:
    records = [(name, t.data) for name, t in params.named_tensors()]
    records += [(f"buffer.{name}", arr) for name, arr in params.encoder.named_buffers()]
    records += list(_history_tensors(history).items())
    return records


def save_checkpoint(params: MatcherParams, history: Sequence[EpochRecord], path, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    echo = config_echo(params.config, params.tau, extra).encode("utf-8")
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    records = _tensor_records(params, history)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[MatcherParams, list[EpochRecord], dict[str, str]]:
    """Read a checkpoint; with ``expected`` the stored shapes must match it.

    Nothing is returned unless the whole file parses and validates.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        echo = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: config echo is not UTF-8") from None
    try:
        config, tau, extra = parse_echo(echo)
    except CheckpointError:
        raise
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config echo ({exc})") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")

    target = expected if expected is not None else config
    if expected is not None and (expected.alphabet != config.alphabet or expected.model != config.model):
        raise CheckpointError(
            f"checkpoint alphabet/model ({config.alphabet!r}, {config.model}) differ from "
            f"the configured ({expected.alphabet!r}, {expected.model})"
        )
    template = init_params(target, seed=0)
    for name, t in list(template.named_tensors()) + [
        (f"buffer.{n}", Tensor(a)) for n, a in template.encoder.named_buffers()
    ]:
        if name not in tensors:
            raise CheckpointError(f"{path}: tensor {name!r} missing")
        if tensors[name].shape != t.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, configuration expects {t.shape}"
            )
    for name, t in template.named_tensors():
        t.data[...] = tensors[name]
    for name, arr in template.encoder.named_buffers():
        arr[...] = tensors[f"buffer.{name}"]
    template.tau = tau

    history = []
    losses = tensors.get("history.loss", np.zeros(0))
    f1s = tensors.get("history.val_f1", np.full(len(losses), np.nan))
    taus = tensors.get("history.tau", np.full(len(losses), np.nan))
    for k in range(len(losses)):
        history.append(
            EpochRecord(
                k,
                float(losses[k]),
                None if np.isnan(f1s[k]) else float(f1s[k]),
                None if np.isnan(taus[k]) else float(taus[k]),
            )
        )
    return template, history, extra
