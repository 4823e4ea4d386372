"""Contact-sheet rendering for coefficient sweeps.

Tiles same-size images left to right with the blending coefficient burned
into a 12-pixel header strip above each tile, using a built-in 5x7 glyph
set (digits, dot, minus).
"""

from __future__ import annotations

import numpy as np

__all__ = ["HEADER_ROWS", "text_bitmap", "contact_sheet"]

HEADER_ROWS = 12
_GAP = 2

_GLYPHS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    ".": ("00000", "00000", "00000", "00000", "00000", "01100", "01100"),
    "-": ("00000", "00000", "00000", "01110", "00000", "00000", "00000"),
    " ": ("00000", "00000", "00000", "00000", "00000", "00000", "00000"),
}


def text_bitmap(text: str) -> np.ndarray:
    """Render a string into a 7-row 0/1 array (1 = ink)."""
    cols = []
    for ch in text:
        glyph = _GLYPHS.get(ch, _GLYPHS[" "])
        cols.append(np.array([[int(c) for c in row] for row in glyph], dtype=np.uint8))
        cols.append(np.zeros((7, 1), dtype=np.uint8))
    if not cols:
        return np.zeros((7, 0), dtype=np.uint8)
    return np.concatenate(cols[:-1], axis=1)


def contact_sheet(entries) -> np.ndarray:
    """Tile labeled (H, W, C) images into one (H+12, ?, C) float32 image.

    ``entries`` is a sequence of (label, image) pairs; all images must share
    shape. Labels render black on the white header strip.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("contact_sheet needs at least one image")
    shape = entries[0][1].shape
    tiles = []
    for label, img in entries:
        if img.shape != shape:
            raise ValueError(f"contact_sheet: image shape {img.shape} != {shape}")
        h, w, c = img.shape
        tile = np.ones((HEADER_ROWS + h, w, c), dtype=np.float32)
        bitmap = text_bitmap(label)
        bh, bw = bitmap.shape
        bw = min(bw, w - 2)
        tile[2 : 2 + bh, 2 : 2 + bw, :] = np.where(bitmap[:, :bw, None] > 0, 0.0, 1.0)
        tile[HEADER_ROWS:, :, :] = img
        tiles.append(tile)
        tiles.append(np.ones((HEADER_ROWS + h, _GAP, c), dtype=np.float32))
    return np.concatenate(tiles[:-1], axis=1)
