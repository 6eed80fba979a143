"""Model evaluation on a manifest and report serialisation."""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Mapping

import numpy as np

from .datagen import DatasetManifest, ManifestEntry
from .matcher import MatcherParams
from .metrics import (
    EvalReport,
    ScoredSample,
    confusion_metrics,
    recognition_similarity,
    select_threshold,
)
from .tensor import ConfigurationError
from .training import prepare, score_batches

BREAKDOWN_KEYS = ("branch", "style")


@dataclasses.dataclass
class _Loaded:
    image: np.ndarray
    text: str
    label: int
    meta: dict


def _materialise(manifest: DatasetManifest, entries: list[ManifestEntry]) -> list[_Loaded]:
    cache: dict[str, np.ndarray] = {}
    out = []
    for e in entries:
        if e.path not in cache:
            cache[e.path] = manifest.load_image(e)
        out.append(_Loaded(cache[e.path], e.text, e.label, e.meta))
    return out


def score_entries(params: MatcherParams, manifest: DatasetManifest, entries: list[ManifestEntry], reduction: str = "mean") -> list[ScoredSample]:
    if not entries:
        return []
    data = prepare(_materialise(manifest, entries), params.config)
    scores = score_batches(params, data, reduction)
    return [ScoredSample(float(s), int(e.label), dict(e.meta)) for s, e in zip(scores, entries)]


def check_compatible(params: MatcherParams, manifest: DatasetManifest) -> None:
    if params.config.alphabet != manifest.alphabet:
        raise ConfigurationError(
            f"checkpoint alphabet {params.config.alphabet!r} differs from manifest alphabet {manifest.alphabet!r}"
        )


def evaluate_model(
    params: MatcherParams,
    manifest: DatasetManifest,
    reduction: str = "mean",
    criterion: str = "f1",
    baseline: str | None = None,
) -> EvalReport:
    """Pick the threshold on the validation split, report on the test split.

    ``baseline="naive"`` scores with the average-embedding cosine instead of
    cross-attention (same embeddings).
    """
    check_compatible(params, manifest)
    if baseline is not None:
        if baseline not in ("naive", "textmatcher"):
            raise ConfigurationError(f"unknown baseline {baseline!r}")
        params = dataclasses.replace(params, config=dataclasses.replace(params.config, model=baseline))
        params.config.validate()
    val = score_entries(params, manifest, manifest.split("val"), reduction)
    start = time.perf_counter()
    test = score_entries(params, manifest, manifest.split("test"), reduction)
    elapsed = time.perf_counter() - start
    tau = select_threshold(val, criterion)
    report = confusion_metrics(test, tau, BREAKDOWN_KEYS)
    report.throughput = len(test) / elapsed if elapsed > 0 else math.inf
    return report


def recognition_scores(transcripts: Mapping[str, str], manifest: DatasetManifest, entries: list[ManifestEntry]) -> list[ScoredSample]:
    """Score entries by edit similarity between a transcription of their image and their text."""
    out = []
    for e in entries:
        if e.path not in transcripts:
            raise KeyError(f"no transcription for {e.path}")
        out.append(ScoredSample(recognition_similarity(transcripts[e.path], e.text), e.label, dict(e.meta)))
    return out


def evaluate_recognition(transcripts: Mapping[str, str], manifest: DatasetManifest, criterion: str = "f1") -> EvalReport:
    val = recognition_scores(transcripts, manifest, manifest.split("val"))
    test = recognition_scores(transcripts, manifest, manifest.split("test"))
    tau = select_threshold(val, criterion)
    return confusion_metrics(test, tau, BREAKDOWN_KEYS)


# ---------------------------------------------------------------- serialisation


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_records(report: EvalReport, prefix: str = "") -> list[tuple[str, str]]:
    """Flat key/value pairs; throughput is left out so files stay reproducible."""
    items = [
        ("tau", report.tau),
        ("tp", report.tp),
        ("fp", report.fp),
        ("tn", report.tn),
        ("fn", report.fn),
        ("tp_rate", report.tp_rate),
        ("fp_rate", report.fp_rate),
        ("tn_rate", report.tn_rate),
        ("fn_rate", report.fn_rate),
        ("f1", report.f1),
    ]
    out = [(prefix + k, _fmt(v)) for k, v in items]
    for name in sorted(report.breakdown):
        out += report_records(report.breakdown[name], f"{prefix}{name}.")
    return out


def format_key_values(report: EvalReport) -> str:
    return "".join(f"{k}={v}\n" for k, v in report_records(report))


def _pct(v) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def format_table(report: EvalReport, title: str = "") -> str:
    """Table in the layout ``tau TP FP TN FN F1`` (rates and F1 in percent)."""
    header = f"{'':<24}{'tau':>10}{'TP':>9}{'FP':>9}{'TN':>9}{'FN':>9}{'F1':>9}"
    rows = [("all", report)] + sorted(report.breakdown.items())
    lines = [title] if title else []
    lines.append(header)
    for name, r in rows:
        row = r.summary_row()
        lines.append(
            f"{name:<24}{row['tau']:>10.4f}{_pct(row['TP']):>9}{_pct(row['FP']):>9}"
            f"{_pct(row['TN']):>9}{_pct(row['FN']):>9}{_pct(row['F1']):>9}"
        )
    return "\n".join(lines) + "\n"
