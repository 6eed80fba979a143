"""Desk-scale learning experiment on synthetic digit strings.

For each seed, trains three toy models with identical settings:
cross-attention on random negatives, cross-attention on one-edit
negatives, and the average-embedding baseline on one-edit negatives.
Prints test F1 per run and the two orderings per seed.

    python3 scripts/desk_learning.py --seeds 0 1 2 3 4 --out desk.json
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import asdict, dataclass

from textmatch.datagen import DatasetSpec, build_dataset
from textmatch.matcher import ModelConfig, init_params
from textmatch.metrics import ScoredSample, confusion_metrics
from textmatch.training import TrainConfig, prepare, score_batches, train


@dataclass(frozen=True)
class DeskSettings:
    pairs: int = 2000
    text_length: int = 6
    s_i: int = 32
    d_i: int = 64
    d_t: int = 64
    d_att: int = 32
    channels: tuple[int, int, int] = (8, 16, 64)
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 10


RUNS = (("random", "textmatcher"), ("edit1", "textmatcher"), ("edit1", "naive"))


def run_one(mode: str, model: str, seed: int, s: DeskSettings) -> float:
    """Train on a fresh dataset and return test F1 at the validation-chosen threshold."""
    manifest = build_dataset(DatasetSpec("synthetic", s.pairs, seed, mode=mode, text_length=s.text_length))
    cfg = ModelConfig(
        alphabet=manifest.alphabet,
        s_t=manifest.s_t,
        s_i=s.s_i,
        d_i=s.d_i,
        d_t=s.d_t,
        d_att=s.d_att,
        channels=s.channels,
        model=model,
    )
    train_set = prepare(manifest.split("train"), cfg)
    val_set = prepare(manifest.split("val"), cfg)
    test_set = prepare(manifest.split("test"), cfg)
    tc = TrainConfig(
        learning_rate=s.learning_rate,
        momentum=s.momentum,
        batch_size=s.batch_size,
        max_epochs=s.epochs,
        seed=seed,
    )
    params, _ = train(train_set, tc, init_params(cfg, seed), validation=val_set)
    scores = score_batches(params, test_set)
    scored = [ScoredSample(float(v), int(l)) for v, l in zip(scores, test_set.labels)]
    return float(confusion_metrics(scored, params.tau).f1 or 0.0)


def run_seed(seed: int, s: DeskSettings, log=print) -> dict[str, float]:
    out = {}
    for mode, model in RUNS:
        t0 = time.perf_counter()
        out[f"{mode}/{model}"] = f1 = run_one(mode, model, seed, s)
        log(f"seed {seed} {mode:6s} {model:11s} test F1 {f1:.4f} ({time.perf_counter() - t0:.0f} s)")
    return out


def summarise(results: dict[int, dict[str, float]]) -> dict[str, int]:
    return {
        "random_above_edit1": sum(r["random/textmatcher"] > r["edit1/textmatcher"] for r in results.values()),
        "textmatcher_above_naive": sum(r["edit1/textmatcher"] > r["edit1/naive"] for r in results.values()),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=DeskSettings.epochs)
    ap.add_argument("--pairs", type=int, default=DeskSettings.pairs)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    settings = DeskSettings(pairs=args.pairs, epochs=args.epochs)
    start = time.perf_counter()
    results = {seed: run_seed(seed, settings) for seed in args.seeds}
    summary = summarise(results)
    elapsed = time.perf_counter() - start
    print(f"orderings held: {summary} over {len(results)} seeds in {elapsed / 60:.1f} min")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"settings": asdict(settings), "results": results, "summary": summary, "minutes": elapsed / 60}, fh, indent=2)


if __name__ == "__main__":
    main()
