"""Labelled matching/non-matching datasets.

Three profiles are supported:

``date``
    dd/mm/yyyy issue dates normalised to ``ddmmyy`` with the leading zeros of
    day and month written as ``*``; negatives from the date perturbation
    generator.
``synthetic``
    random digit strings; negatives from a word generator mode
    (``random``, ``edit1``, ``edit12`` or ``mixed``).
``iam``
    words loaded from an IAM-style ``words.txt``; negatives as for
    ``synthetic``.

Images for ``date`` and ``synthetic`` are rendered by the glyph rasterizer.
"""

from __future__ import annotations

import datetime as dt
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedders import DIGIT_ALPHABET, IAM_ALPHABET, PAD, Alphabet
from .glyphs import GlyphAtlas, rasterize_text
from .metrics import levenshtein
from .pgm import read_pgm, write_pgm

log = logging.getLogger(__name__)

PROFILES = ("date", "synthetic", "iam")
WORD_MODES = ("random", "edit1", "edit12", "mixed")
DATE_BRANCHES = ("day", "month", "year_digit", "year_swap", "random_date")
DATE_BRANCH_PROBS = (0.3, 0.3, 0.15, 0.15, 0.1)
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.tsv"

PROFILE_DEFAULTS = {
    "date": {"alphabet": DIGIT_ALPHABET, "s_t": 6},
    "synthetic": {"alphabet": DIGIT_ALPHABET, "s_t": 8},
    "iam": {"alphabet": IAM_ALPHABET, "s_t": 24},
}


class DataError(ValueError):
    """Generator or loader input is invalid."""


@dataclass
class MatchSample:
    image: np.ndarray
    text: str
    label: int
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class ManifestEntry:
    path: str
    text: str
    label: int
    meta: dict[str, str]
    split: str
    image: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class DatasetManifest:
    profile: str
    alphabet: str
    s_t: int
    seed: int
    entries: list[ManifestEntry]
    root: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load_image(self, entry: ManifestEntry) -> np.ndarray:
        if entry.image is not None:
            return entry.image
        if self.root is None:
            raise DataError("manifest has neither in-memory images nor a root directory")
        return read_pgm(self.root / entry.path)


# ---------------------------------------------------------------- dates


_DATE_RE = re.compile(r"^(\d{1,2})/(\d{1,2})/(\d{4})$")


def normalize_date(date: str) -> str:
    """``dd/mm/yyyy`` to ``ddmmyy`` with leading day/month zeros as ``*``."""
    m = _DATE_RE.match(date.strip())
    if not m:
        raise DataError(f"malformed date {date!r}; expected dd/mm/yyyy")
    day, month, year = (int(g) for g in m.groups())
    try:
        dt.date(year, month, day)
    except ValueError as exc:
        raise DataError(f"invalid calendar date {date!r}: {exc}") from None
    return _format_date(day, month, year)


def _format_date(day: int, month: int, year: int) -> str:
    def two(v):
        return f"{v:02d}".replace("0", PAD, 1) if v < 10 else f"{v:02d}"

    return two(day) + two(month) + f"{year % 100:02d}"


def is_normalized_date(text: str) -> bool:
    """Syntactic check: day tens in ``*123``, month tens in ``*1``, digits elsewhere."""
    return (
        len(text) == 6
        and text[0] in "*123"
        and text[2] in "*1"
        and all(text[i].isdigit() for i in (1, 3, 4, 5))
    )


def _random_date(rng: np.random.Generator, first_year: int = 2000, last_year: int = 2030) -> str:
    start = dt.date(first_year, 1, 1).toordinal()
    stop = dt.date(last_year, 12, 31).toordinal()
    d = dt.date.fromordinal(int(rng.integers(start, stop + 1)))
    return _format_date(d.day, d.month, d.year)


def _replace_digit(date6: str, slots: Sequence[int], rng: np.random.Generator) -> str:
    pos = int(slots[int(rng.integers(len(slots)))])
    if rng.random() < 0.5:
        pool = "0123456789"
    else:
        pool = "".join(sorted({c for c in date6 if c.isdigit()})) or "0123456789"
    digit = pool[int(rng.integers(len(pool)))]
    if pos in (0, 2) and digit == "0":
        digit = PAD
    return date6[:pos] + digit + date6[pos + 1 :]


def draw_negative_date(
    date6: str,
    train_years: Sequence[int | str],
    rng: np.random.Generator,
    branch: str | None = None,
) -> tuple[str, str]:
    """Perturb a normalised date; returns ``(negative, branch)``.

    The branch is drawn with probabilities 0.3/0.3/0.15/0.15/0.1 unless
    forced. Within a branch, draws are repeated until the result differs
    from the input and stays syntactically valid.
    """
    if not is_normalized_date(date6):
        raise DataError(f"{date6!r} is not a normalised ddmmyy date")
    years = sorted({f"{int(y) % 100:02d}" for y in train_years})
    if not years:
        raise DataError("train_years must not be empty")
    if branch is None:
        branch = DATE_BRANCHES[int(rng.choice(len(DATE_BRANCHES), p=DATE_BRANCH_PROBS))]
    elif branch not in DATE_BRANCHES:
        raise DataError(f"unknown date branch {branch!r}")

    if branch == "year_swap":
        others = [y for y in years if y != date6[4:]]
        if not others:
            # nothing to swap to; fall back to a year digit change
            return draw_negative_date(date6, train_years, rng, "year_digit")[0], branch
        return date6[:4] + others[int(rng.integers(len(others)))], branch

    while True:
        if branch == "day":
            out = _replace_digit(date6, (0, 1), rng)
        elif branch == "month":
            out = _replace_digit(date6, (2, 3), rng)
        elif branch == "year_digit":
            pos = 4 + int(rng.integers(2))
            choices = [d for d in "0123456789" if d != date6[pos]]
            out = date6[:pos] + choices[int(rng.integers(9))] + date6[pos + 1 :]
        else:
            out = _random_date(rng)
        if out != date6 and is_normalized_date(out):
            return out, branch


def gen_negative_date(date6: str, train_years: Sequence[int | str], rng: np.random.Generator, branch: str | None = None) -> str:
    return draw_negative_date(date6, train_years, rng, branch)[0]


# ---------------------------------------------------------------- words


def _edit_once(word: str, symbols: str, rng: np.random.Generator) -> str:
    ops = ["sub", "ins", "del"] if word else ["ins"]
    op = ops[int(rng.integers(len(ops)))]
    if op == "ins":
        pos = int(rng.integers(len(word) + 1))
        return word[:pos] + symbols[int(rng.integers(len(symbols)))] + word[pos:]
    pos = int(rng.integers(len(word)))
    if op == "del":
        return word[:pos] + word[pos + 1 :]
    choices = [c for c in symbols if c != word[pos]]
    return word[:pos] + choices[int(rng.integers(len(choices)))] + word[pos + 1 :]


def _at_distance(word: str, distance: int, symbols: str, rng: np.random.Generator) -> str:
    while True:
        out = word
        for _ in range(distance):
            out = _edit_once(out, symbols, rng)
        if levenshtein(word, out) == distance:
            return out


def draw_negative_word(
    word: str,
    vocab: Sequence[str],
    mode: str,
    rng: np.random.Generator,
    alphabet: Alphabet | str = IAM_ALPHABET,
) -> tuple[str, str]:
    """Non-matching text for ``word``; returns ``(negative, branch)``.

    ``branch`` is ``random``, ``edit1`` or ``edit2`` and records which
    generator produced the negative.
    """
    if mode not in WORD_MODES:
        raise DataError(f"unknown negative mode {mode!r}; expected one of {WORD_MODES}")
    symbols = (alphabet if isinstance(alphabet, Alphabet) else Alphabet(alphabet)).symbols()
    bad = [c for c in word if c not in symbols]
    if bad:
        raise DataError(f"word {word!r} has characters outside the alphabet: {bad}")
    if mode == "mixed":
        mode = ("random", "edit1", "edit2")[int(rng.integers(3))]
    elif mode == "edit12":
        mode = ("edit1", "edit2")[int(rng.integers(2))]

    if mode == "random":
        pool = [w for w in vocab if w != word]
        if not pool:
            raise DataError(f"vocabulary has no word other than {word!r}")
        return pool[int(rng.integers(len(pool)))], "random"
    distance = 1 if mode == "edit1" else 2
    return _at_distance(word, distance, symbols, rng), mode


def gen_negative_word(word: str, vocab: Sequence[str], mode: str, rng: np.random.Generator, alphabet: Alphabet | str = IAM_ALPHABET) -> str:
    return draw_negative_word(word, vocab, mode, rng, alphabet)[0]


# ---------------------------------------------------------------- IAM loader


def load_iam_words(words_file, images_dir, alphabet: Alphabet | str = IAM_ALPHABET, min_len: int = 5) -> list[MatchSample]:
    """Matching samples from an IAM ``words.txt`` and its image tree.

    Keeps records segmented ``ok`` whose lowercased transcription is inside
    the alphabet (pad excluded), is not made only of punctuation, and has at
    least ``min_len`` characters. Images are looked up as
    ``<images_dir>/<form-prefix>/<form>/<id>.png`` (``.pgm`` also accepted).
    """
    symbols = set((alphabet if isinstance(alphabet, Alphabet) else Alphabet(alphabet)).symbols())
    images_dir = Path(images_dir)
    samples = []
    with open(words_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(" ")
            if len(parts) < 9:
                raise DataError(f"{words_file}:{lineno}: expected at least 9 fields, got {len(parts)}")
            word_id, status = parts[0], parts[1]
            text = " ".join(parts[8:]).lower()
            if status != "ok":
                continue
            if len(text) < min_len or any(c not in symbols for c in text):
                continue
            if all(not c.isalnum() for c in text):
                continue
            id_parts = word_id.split("-")
            if len(id_parts) < 3:
                raise DataError(f"{words_file}:{lineno}: malformed word id {word_id!r}")
            folder = images_dir / id_parts[0] / f"{id_parts[0]}-{id_parts[1]}"
            image = _load_word_image(folder, word_id)
            if image is None:
                log.warning("%s:%d: image for %s not found, skipping", words_file, lineno, word_id)
                continue
            samples.append(MatchSample(image, text, 1, {"source": "iam", "id": word_id}))
    return samples


def _load_word_image(folder: Path, word_id: str) -> np.ndarray | None:
    pgm = folder / f"{word_id}.pgm"
    if pgm.exists():
        return read_pgm(pgm)
    png = folder / f"{word_id}.png"
    if png.exists():
        from PIL import Image

        with Image.open(png) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    return None


# ---------------------------------------------------------------- dataset building


@dataclass(frozen=True)
class DatasetSpec:
    profile: str
    pairs: int
    seed: int
    mode: str = "random"
    text_length: int = 6
    train_years: tuple[int, ...] = (2018, 2019, 2020, 2021)


def _split_tags(n_pairs: int, rng: np.random.Generator) -> list[str]:
    n_train = (8 * n_pairs) // 10
    n_val = n_pairs // 10
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * (n_pairs - n_train - n_val)
    order = rng.permutation(n_pairs)
    return [tags[i] for i in np.argsort(order, kind="stable")]


def _positive_texts(spec: DatasetSpec, rng: np.random.Generator) -> list[str]:
    if spec.profile == "date":
        first = min(spec.train_years)
        last = max(spec.train_years)
        start = dt.date(first, 1, 1).toordinal()
        span = dt.date(last, 12, 31).toordinal() - start + 1
        if spec.pairs > span:
            raise DataError(f"only {span} distinct dates in {first}-{last}, {spec.pairs} requested")
        days = rng.choice(span, size=spec.pairs, replace=False)
        out = []
        for d in days:
            day = dt.date.fromordinal(start + int(d))
            out.append(_format_date(day.day, day.month, day.year))
        return out
    capacity = 10 ** spec.text_length
    if spec.pairs > capacity:
        raise DataError(f"only {capacity} distinct {spec.text_length}-digit strings, {spec.pairs} requested")
    seen: set[str] = set()
    out = []
    while len(out) < spec.pairs:
        s = "".join(str(int(d)) for d in rng.integers(0, 10, size=spec.text_length))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def build_dataset(
    spec: DatasetSpec,
    atlas: GlyphAtlas | None = None,
    source: Sequence[MatchSample] | None = None,
) -> DatasetManifest:
    """Generate ``spec.pairs`` matching pairs, one negative each, split 80/10/10.

    Both samples of a pair share an image and a split. For the ``iam``
    profile the matching pairs come from ``source`` (see
    :func:`load_iam_words`); the vocabulary for random negatives is the set
    of matching texts.
    """
    if spec.profile not in PROFILES:
        raise DataError(f"unknown profile {spec.profile!r}; expected one of {PROFILES}")
    if spec.pairs < 1:
        raise DataError("at least one pair is required")
    defaults = PROFILE_DEFAULTS[spec.profile]
    alphabet = Alphabet(defaults["alphabet"])
    text_rng, neg_rng, split_rng, img_seq = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4))

    if spec.profile == "iam":
        if source is None:
            raise DataError("the iam profile needs loaded source samples")
        if spec.pairs > len(source):
            raise DataError(f"{spec.pairs} pairs requested but only {len(source)} words loaded")
        picked = [source[int(i)] for i in text_rng.permutation(len(source))[: spec.pairs]]
        texts = [s.text for s in picked]
        images = [s.image for s in picked]
    else:
        texts = _positive_texts(spec, text_rng)
        atlas = atlas or GlyphAtlas.default(alphabet.chars)
        seeds = img_seq.integers(0, 2**63 - 1, size=len(texts))
        images = [rasterize_text(t, atlas, np.random.default_rng(int(s))) for t, s in zip(texts, seeds)]

    vocab = sorted(set(texts))
    tags = _split_tags(spec.pairs, split_rng)
    entries = []
    for k, (text, image, tag) in enumerate(zip(texts, images, tags)):
        if spec.profile == "date":
            neg, branch = draw_negative_date(text, spec.train_years, neg_rng)
        else:
            neg, branch = draw_negative_word(text, vocab, spec.mode, neg_rng, alphabet)
        path = f"images/{k:06d}.pgm"
        entries.append(ManifestEntry(path, text, 1, {"pair": str(k)}, tag, image))
        entries.append(ManifestEntry(path, neg, 0, {"pair": str(k), "branch": branch}, tag, image))
    return DatasetManifest(spec.profile, alphabet.chars, defaults["s_t"], spec.seed, entries)


# ---------------------------------------------------------------- manifest files


def _format_meta(meta: dict[str, str]) -> str:
    return ";".join(f"{k}={meta[k]}" for k in sorted(meta)) or "-"


def _parse_meta(text: str) -> dict[str, str]:
    if text == "-":
        return {}
    out = {}
    for item in text.split(";"):
        k, _, v = item.partition("=")
        out[k] = v
    return out


def write_manifest(manifest: DatasetManifest, out_dir) -> Path:
    """Write images (PGM) and ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    written = set()
    for e in manifest.entries:
        if e.path not in written:
            if e.image is None:
                raise DataError(f"entry {e.path} has no image to write")
            write_pgm(out_dir / e.path, e.image)
            written.add(e.path)
    lines = [
        f"# profile={manifest.profile}",
        f"# alphabet={manifest.alphabet}",
        f"# s_t={manifest.s_t}",
        f"# seed={manifest.seed}",
    ]
    for e in manifest.entries:
        lines.append("\t".join([e.path, e.text, str(e.label), _format_meta(e.meta), e.split]))
    path = out_dir / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.root = out_dir
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    header: dict[str, str] = {}
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            header[k] = v
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        img, text, label, meta, split = fields
        if split not in SPLITS or label not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: bad label or split tag")
        if not (path.parent / img).exists():
            raise DataError(f"{path}:{lineno}: image {img} does not exist")
        entries.append(ManifestEntry(img, text, int(label), _parse_meta(meta), split))
    try:
        return DatasetManifest(
            header["profile"], header["alphabet"], int(header["s_t"]), int(header["seed"]), entries, path.parent
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing header field {exc}") from None
