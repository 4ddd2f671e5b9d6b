"""Levenshtein edit distance, raw and normalized.

Scores all over this package are edit distances: lower means more similar.
"""

from __future__ import annotations

RAW = "raw"
NORMALIZED = "normalized"
DISTANCE_MODES = (RAW, NORMALIZED)


def levenshtein(a: str, b: str) -> int:
    """Classic Levenshtein distance (insert/delete/substitute, unit costs)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(
                min(
                    prev[j] + 1,
                    cur[j - 1] + 1,
                    prev[j - 1] + (ca != cb),
                )
            )
        prev = cur
    return prev[-1]


def normalized_levenshtein(a: str, b: str) -> float:
    """Distance scaled by the longer length; two empty strings score 0."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


def distance(a: str, b: str, mode: str = RAW) -> float:
    """Dispatch on the configured distance mode."""
    if mode == RAW:
        return float(levenshtein(a, b))
    if mode == NORMALIZED:
        return normalized_levenshtein(a, b)
    raise ValueError(f"unknown distance mode {mode!r}")


def edit_similarity(a: str, b: str) -> float:
    """1 - normalized distance; 1.0 means identical."""
    return 1.0 - normalized_levenshtein(a, b)
