"""Procedural glyph atlas and text rasterizer.

Glyphs start from a 5x7 dot-matrix font, are upscaled, and come in several
style variants (stroke weight, slant). Rendering composes them left to right
with jittered spacing and baseline, then adds noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_FONT_5x7 = {
    "0": ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    "3": ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    "4": ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "8": ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    "9": ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
    "a": ["00000", "00000", "01110", "00001", "01111", "10001", "01111"],
    "b": ["10000", "10000", "10110", "11001", "10001", "10001", "11110"],
    "c": ["00000", "00000", "01110", "10000", "10000", "10001", "01110"],
    "d": ["00001", "00001", "01101", "10011", "10001", "10001", "01111"],
    "e": ["00000", "00000", "01110", "10001", "11111", "10000", "01110"],
    "f": ["00110", "01001", "01000", "11100", "01000", "01000", "01000"],
    "g": ["00000", "01111", "10001", "10001", "01111", "00001", "01110"],
    "h": ["10000", "10000", "10110", "11001", "10001", "10001", "10001"],
    "i": ["00100", "00000", "01100", "00100", "00100", "00100", "01110"],
    "j": ["00010", "00000", "00110", "00010", "00010", "10010", "01100"],
    "k": ["10000", "10000", "10010", "10100", "11000", "10100", "10010"],
    "l": ["01100", "00100", "00100", "00100", "00100", "00100", "01110"],
    "m": ["00000", "00000", "11010", "10101", "10101", "10001", "10001"],
    "n": ["00000", "00000", "10110", "11001", "10001", "10001", "10001"],
    "o": ["00000", "00000", "01110", "10001", "10001", "10001", "01110"],
    "p": ["00000", "00000", "11110", "10001", "11110", "10000", "10000"],
    "q": ["00000", "00000", "01101", "10011", "01111", "00001", "00001"],
    "r": ["00000", "00000", "10110", "11001", "10000", "10000", "10000"],
    "s": ["00000", "00000", "01110", "10000", "01110", "00001", "11110"],
    "t": ["01000", "01000", "11100", "01000", "01000", "01001", "00110"],
    "u": ["00000", "00000", "10001", "10001", "10001", "10011", "01101"],
    "v": ["00000", "00000", "10001", "10001", "10001", "01010", "00100"],
    "w": ["00000", "00000", "10001", "10001", "10101", "10101", "01010"],
    "x": ["00000", "00000", "10001", "01010", "00100", "01010", "10001"],
    "y": ["00000", "00000", "10001", "10001", "01111", "00001", "01110"],
    "z": ["00000", "00000", "11111", "00010", "00100", "01000", "11111"],
    "-": ["00000", "00000", "00000", "11111", "00000", "00000", "00000"],
    "'": ["00100", "00100", "01000", "00000", "00000", "00000", "00000"],
}

GLYPH_SCALE = 3
BLANK_CHAR = "*"


class GlyphError(KeyError):
    """A character has no glyph in the atlas."""


def _base_bitmap(ch: str) -> np.ndarray:
    rows = _FONT_5x7[ch]
    return np.array([[c == "1" for c in r] for r in rows], dtype=np.float64)


def _style(bitmap: np.ndarray, bold: bool, slant: float) -> np.ndarray:
    big = np.kron(bitmap, np.ones((GLYPH_SCALE, GLYPH_SCALE)))
    if bold:
        thick = big.copy()
        thick[:, 1:] = np.maximum(thick[:, 1:], big[:, :-1])
        big = thick
    if slant:
        h, w = big.shape
        extra = int(np.ceil(abs(slant) * h))
        out = np.zeros((h, w + extra))
        for r in range(h):
            shift = int(round(slant * (h - 1 - r))) if slant > 0 else int(round(-slant * r))
            out[r, shift : shift + w] = big[r]
        big = out
    return big


@dataclass
class GlyphAtlas:
    """Per-character ink bitmaps (values in [0, 1]) plus rendering jitter."""

    glyphs: dict[str, list[np.ndarray]]
    baseline_jitter: int = 2
    spacing: tuple[int, int] = (1, 4)
    noise: float = 12.0
    height: int = 32
    margin: int = 4
    background: float = 235.0
    ink: float = 30.0

    @classmethod
    def default(cls, chars: str | None = None, **jitter) -> "GlyphAtlas":
        chars = chars if chars is not None else "".join(_FONT_5x7)
        glyphs: dict[str, list[np.ndarray]] = {}
        for ch in chars:
            if ch == BLANK_CHAR:
                continue
            if ch not in _FONT_5x7:
                raise GlyphError(f"no procedural glyph for {ch!r}")
            base = _base_bitmap(ch)
            glyphs[ch] = [
                _style(base, bold, slant)
                for bold in (False, True)
                for slant in (0.0, 0.15, -0.1)
            ]
        return cls(glyphs=glyphs, **jitter)

    def glyph_width(self) -> int:
        return 5 * GLYPH_SCALE


def rasterize_text(text: str, atlas: GlyphAtlas, rng: np.random.Generator) -> np.ndarray:
    """Render ``text`` to an 8-bit grayscale raster (dark ink on light paper).

    The pad character renders as a blank glyph-sized gap.
    """
    for pos, ch in enumerate(text):
        if ch != BLANK_CHAR and ch not in atlas.glyphs:
            raise GlyphError(f"no glyph for {ch!r} at position {pos}")
    lo, hi = atlas.spacing
    pieces: list[tuple[int, int, np.ndarray | None]] = []
    x = atlas.margin
    for ch in text:
        if ch == BLANK_CHAR:
            bmp = None
            width = atlas.glyph_width()
            dy = 0
        else:
            variants = atlas.glyphs[ch]
            bmp = variants[int(rng.integers(len(variants)))]
            width = bmp.shape[1]
            dy = int(rng.integers(-atlas.baseline_jitter, atlas.baseline_jitter + 1))
        pieces.append((x, dy, bmp))
        x += width + int(rng.integers(lo, hi + 1))
    width = max(x + atlas.margin, 2 * atlas.margin + atlas.glyph_width())
    ink = np.zeros((atlas.height, width))
    glyph_h = 7 * GLYPH_SCALE
    top0 = (atlas.height - glyph_h) // 2
    for x0, dy, bmp in pieces:
        if bmp is None:
            continue
        top = min(max(top0 + dy, 0), atlas.height - bmp.shape[0])
        region = ink[top : top + bmp.shape[0], x0 : x0 + bmp.shape[1]]
        np.maximum(region, bmp, out=region)
    img = atlas.background - (atlas.background - atlas.ink) * ink
    img = img + rng.normal(0.0, atlas.noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
