"""Command-line entry point: ``textmatch {gen,train,score,eval}``.

Settings come from defaults, then an optional ``--config`` file of
``key=value`` lines, then explicit flags. The resolved settings are written
next to every artifact in canonical form.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shutil
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import datagen, evaluation, training
from .datagen import DataError, DatasetSpec, build_dataset, load_iam_words, read_manifest, write_manifest
from .embedders import Alphabet, InputError, encode_indices, preprocess_image
from .matcher import ModelConfig, attention_csv, classify, forward_attention, forward_scores, init_params
from .metrics import CRITERIA
from .pgm import read_pgm
from .tensor import ConfigurationError, Tensor
from .training import CheckpointError, TrainConfig, TrainingError

log = logging.getLogger("textmatch")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


@dataclass
class RunConfig:
    profile: str = "synthetic"
    negatives: str = "random"
    pairs: int = 1000
    text_length: int = 6
    seed: int = 0
    margin: float = 1.0
    alpha: float = 1.0
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 50
    reduction: str = "mean"
    criterion: str = "f1"
    model: str = "textmatcher"
    s_t: int = 0  # 0 takes the manifest's text length
    s_i: int = 32
    d_i: int = 64
    d_t: int = 64
    d_att: int = 32
    channels: str = "8,16,64"
    manifest: str = ""
    checkpoint: str = ""
    report: str = ""

    def canonical(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def model_config(self, alphabet: str, s_t: int) -> ModelConfig:
        return ModelConfig(
            alphabet=alphabet,
            s_t=self.s_t or s_t,
            s_i=self.s_i,
            d_i=self.d_i,
            d_t=self.d_t,
            d_att=self.d_att,
            channels=tuple(int(c) for c in self.channels.split(",")),
            model=self.model,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            margin=self.margin,
            alpha=self.alpha,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.seed,
            reduction=self.reduction,
            profile=self.profile,
            criterion=self.criterion,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"config value for {key!r} must be {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise UsageError(f"config line {lineno}: expected key=value")
        if key not in _FIELD_TYPES:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    env_seed = os.environ.get("TEXTMATCH_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise UsageError(f"TEXTMATCH_SEED must be an integer, got {env_seed!r}") from None
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        cfg = dataclasses.replace(cfg, **parse_config_text(text))
    overrides = {k: v for k, v in vars(args).items() if k in _FIELD_TYPES and v is not None}
    return dataclasses.replace(cfg, **overrides)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    source = None
    if cfg.profile == "iam":
        if not (args.iam_words and args.iam_images):
            raise UsageError("the iam profile needs --iam-words and --iam-images")
        source = load_iam_words(args.iam_words, args.iam_images)
    spec = DatasetSpec(cfg.profile, cfg.pairs, cfg.seed, mode=cfg.negatives, text_length=cfg.text_length)
    manifest = build_dataset(spec, source=source)
    write_manifest(manifest, out)
    (out / "run_config.txt").write_text(cfg.canonical(), encoding="utf-8")
    counts = {s: len(manifest.split(s)) for s in datagen.SPLITS}
    pos = sum(e.label for e in manifest.entries)
    print(
        f"wrote {len(manifest.entries)} samples ({pos} matching, {len(manifest.entries) - pos} non-matching) "
        f"to {out}: train={counts['train']} val={counts['val']} test={counts['test']}"
    )
    return EXIT_OK


def _load_manifest(path: str):
    if not path:
        raise UsageError("--manifest is required")
    try:
        return read_manifest(path)
    except FileNotFoundError:
        raise UsageError(f"manifest not found: {path}") from None


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = _load_manifest(cfg.manifest)
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    model_cfg = cfg.model_config(manifest.alphabet, manifest.s_t)
    model_cfg.validate()
    train_cfg = cfg.train_config()
    params = init_params(model_cfg, cfg.seed)
    train_set = evaluation._materialise(manifest, manifest.split("train"))
    val_set = evaluation._materialise(manifest, manifest.split("val")) or None

    def progress(rec):
        f1 = "n/a" if rec.val_f1 is None else f"{rec.val_f1:.4f}"
        tau = "n/a" if rec.tau is None else f"{rec.tau:.4f}"
        print(f"epoch {rec.epoch + 1}/{train_cfg.max_epochs} loss={rec.loss:.6f} val_f1={f1} tau={tau}", flush=True)

    params, history = training.train(train_set, train_cfg, params, validation=val_set, progress=progress)
    ckpt = Path(cfg.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(params, history, ckpt, extra={"reduction": cfg.reduction})
    Path(f"{ckpt}.history.tsv").write_text(
        "epoch\tloss\tval_f1\ttau\n"
        + "".join(f"{r.epoch}\t{r.loss!r}\t{r.val_f1!r}\t{r.tau!r}\n" for r in history),
        encoding="utf-8",
    )
    Path(f"{ckpt}.config.txt").write_text(cfg.canonical(), encoding="utf-8")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _load_checkpoint(path: str):
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return training.load_checkpoint(path)


def cmd_score(args) -> int:
    params, _, extra = _load_checkpoint(args.checkpoint)
    reduction = args.reduction or extra.get("reduction", "mean")
    try:
        raw = read_pgm(args.image)
    except OSError as exc:
        raise UsageError(f"cannot read image {args.image}: {exc.strerror}") from None
    cfg = params.config
    enc = encode_indices(args.text, Alphabet(cfg.alphabet), cfg.s_t)
    image = preprocess_image(raw, cfg.image_h, cfg.image_w)
    batch = Tensor(image.data[None])
    score = forward_scores(params, batch, np.array([enc.indices]), np.array([enc.pad_mask]), reduction).item()
    tau = args.tau if args.tau is not None else params.tau
    print(f"score={score!r}")
    if tau is None:
        print("tau=undefined")
        print("label=undefined")
    else:
        print(f"tau={tau!r}")
        print(f"label={classify(score, tau)}")
    if args.dump_attention:
        att = forward_attention(params, image, enc.indices, enc.pad_mask, reduction)
        Path(args.dump_attention).write_text(attention_csv(att.A), encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    manifest = _load_manifest(cfg.manifest)
    if not cfg.report:
        raise UsageError("--report is required")
    if args.baseline == "recognition":
        if not args.transcripts:
            raise UsageError("--baseline recognition needs --transcripts")
        transcripts = {}
        for line in Path(args.transcripts).read_text(encoding="utf-8").splitlines():
            if line.strip():
                path, _, text = line.partition("\t")
                transcripts[path] = text
        report = evaluation.evaluate_recognition(transcripts, manifest, cfg.criterion)
        title = "recognition baseline"
    else:
        params, _, extra = _load_checkpoint(cfg.checkpoint)
        reduction = args.reduction or extra.get("reduction", "mean")
        report = evaluation.evaluate_model(params, manifest, reduction, cfg.criterion, baseline=args.baseline)
        title = args.baseline or params.config.model
        if args.dump_attention and params.config.model == "textmatcher":
            _dump_attention(params, manifest, Path(args.dump_attention), reduction)
    out = Path(cfg.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = evaluation.format_table(report, title)
    Path(f"{out}.txt").write_text(table, encoding="utf-8")
    Path(f"{out}.kv").write_text(evaluation.format_key_values(report), encoding="utf-8")
    print(table, end="")
    if report.throughput is not None:
        print(f"throughput={report.throughput:.1f} samples/s")
    return EXIT_OK


def _dump_attention(params, manifest, out_dir: Path, reduction: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    alphabet = Alphabet(params.config.alphabet)
    for k, e in enumerate(manifest.split("test")):
        enc = encode_indices(e.text, alphabet, params.config.s_t)
        img = preprocess_image(manifest.load_image(e), params.config.image_h, params.config.image_w)
        att = forward_attention(params, img, enc.indices, enc.pad_mask, reduction)
        (out_dir / f"{k:06d}.csv").write_text(attention_csv(att.A), encoding="utf-8")


# ---------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser, names: list[str]) -> None:
    for name in names:
        kind = _FIELD_TYPES[name]
        conv = {"int": int, "float": float}.get(kind, str)
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=conv, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textmatch", description="Image/text matching with cross-attention.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a labelled dataset")
    gen.add_argument("--config")
    gen.add_argument("--profile", choices=datagen.PROFILES)
    gen.add_argument("--negatives", choices=datagen.WORD_MODES)
    _add_run_flags(gen, ["pairs", "text_length", "seed"])
    gen.add_argument("--out", required=True)
    gen.add_argument("--force", action="store_true")
    gen.add_argument("--iam-words")
    gen.add_argument("--iam-images")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model on a manifest")
    tr.add_argument("--config")
    tr.add_argument("--model", choices=("textmatcher", "naive"))
    tr.add_argument("--reduction", choices=("mean", "sum"))
    tr.add_argument("--criterion", choices=CRITERIA)
    _add_run_flags(
        tr,
        ["manifest", "checkpoint", "seed", "margin", "alpha", "momentum", "batch_size", "max_epochs",
         "s_t", "s_i", "d_i", "d_t", "d_att", "channels"],
    )
    tr.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float, default=None)
    tr.add_argument("--epochs", dest="max_epochs", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    sc = sub.add_parser("score", help="score one image against a text")
    sc.add_argument("--image", required=True)
    sc.add_argument("--text", required=True)
    sc.add_argument("--checkpoint", required=True)
    sc.add_argument("--reduction", choices=("mean", "sum"))
    sc.add_argument("--tau", type=float)
    sc.add_argument("--dump-attention")
    sc.set_defaults(func=cmd_score)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--config")
    ev.add_argument("--criterion", choices=CRITERIA)
    ev.add_argument("--reduction", choices=("mean", "sum"))
    ev.add_argument("--baseline", choices=("textmatcher", "naive", "recognition"))
    ev.add_argument("--transcripts")
    ev.add_argument("--dump-attention")
    _add_run_flags(ev, ["manifest", "checkpoint", "report"])
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, InputError, DataError, ConfigurationError, CheckpointError, KeyError, ValueError) as exc:
        print(f"textmatch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OSError, RuntimeError) as exc:
        print(f"textmatch {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
