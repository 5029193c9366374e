"""Shared word lists: caption vocabulary for the tiny backbone and the
synthetic scene generator, plus the reserved empty token used by photometric
prompt edits."""

from __future__ import annotations

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.12),
    "purple": (0.60, 0.15, 0.70),
}

COLOR_NAMES = tuple(COLOR_RGB)
SHAPE_NAMES = ("circle", "square", "triangle")
FILLER_WORDS = ("a", "and")
EMPTY_TOKEN = "<empty>"


def default_vocabulary() -> tuple:
    """Every word a synthetic caption can contain, plus the empty token."""
    return COLOR_NAMES + SHAPE_NAMES + FILLER_WORDS + (EMPTY_TOKEN,)
