"""Segmentation overlap metrics on binary masks."""

from __future__ import annotations

import numpy as np


def _as_binary(t, name: str) -> np.ndarray:
    a = np.asarray(t)
    vals = np.unique(a)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} is not binary: values {vals[:8]}")
    return a.astype(bool)


def dice(a, b) -> float:
    """Dice similarity coefficient 2|A n B| / (|A| + |B|).

    Two empty masks agree perfectly on absence and score 1.0 (conventions
    differ; this one is documented here on purpose).
    """
    a, b = _as_binary(a, "a"), _as_binary(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a, b) -> float:
    """Intersection over union |A n B| / |A u B|; both-empty scores 1.0."""
    a, b = _as_binary(a, "a"), _as_binary(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union
