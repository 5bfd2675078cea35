"""k-nearest-neighbour outlier labelling with a knee threshold, and transition points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evalmetrics import ErrorMatrix, _tsv

__all__ = [
    "OutlierReport",
    "TransitionReport",
    "default_k",
    "k_distances",
    "kneedle",
    "knee_threshold",
    "detect_outliers",
    "transition_point",
]


def default_k(n_rows: int) -> int:
    """k scaled to the number of repetitions: ``max(3, n_rows // 20)``."""
    return max(3, n_rows // 20)


def _rows(matrix) -> np.ndarray:
    values = matrix.values if isinstance(matrix, ErrorMatrix) else np.asarray(matrix, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise ValueError(f"expected an R x C matrix, got shape {values.shape}")
    return values


def k_distances(matrix, k: int = 15) -> np.ndarray:
    """Euclidean distance from every row to its k-th nearest other row.

    Equal distances are ordered by row index.
    """
    x = _rows(matrix)
    R = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if R <= k:
        raise ValueError(f"need more rows than k: got {R} rows for k={k}")
    out = np.empty(R)
    for i in range(R):
        d = np.sqrt(np.sum((x - x[i]) ** 2, axis=1))
        d = np.delete(d, i)
        out[i] = np.sort(d, kind="stable")[k - 1]
    return out


def kneedle(y, orientation: str, sensitivity: float = 1.0):
    """Index of the knee of ``y`` sampled on an even grid, or ``None``.

    ``convex-increasing`` suits sorted k-distances (flat, then a sharp rise):
    the knee is the last point before the rise, ``argmax(x_n - y_n)``.
    ``convex-decreasing`` suits error curves (steep drop, then plateau):
    ``argmax((1 - x_n) - y_n)``. A knee is only reported when the difference
    curve peaks above ``sensitivity / (n - 1)``, the Kneedle acceptance
    threshold given that the curve returns to 0 at its end point.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    span = y.max() - y.min()
    if not np.isfinite(span) or span == 0:
        return None
    x_n = np.linspace(0.0, 1.0, n)
    y_n = (y - y.min()) / span
    if orientation == "convex-increasing":
        diff = x_n - y_n
    elif orientation == "convex-decreasing":
        diff = (1.0 - x_n) - y_n
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    idx = int(np.argmax(diff))
    if diff[idx] <= sensitivity / (n - 1):
        return None
    return idx


def knee_threshold(sorted_distances, sensitivity: float = 1.0):
    """``(threshold, knee_index)`` of ascending k-distances; ``(None, None)`` without a knee."""
    d = np.asarray(sorted_distances, dtype=np.float64)
    if np.any(np.diff(d) < 0):
        raise ValueError("distances must be sorted in ascending order")
    idx = kneedle(d, "convex-increasing", sensitivity)
    if idx is None:
        return None, None
    return float(d[idx]), idx


@dataclass
class OutlierReport:
    """Flagged repetitions, ordered by decreasing k-distance (ties by index)."""

    flagged: list
    distances: np.ndarray
    threshold: float | None
    k: int
    knee_index: int | None
    row_labels: list

    def to_dict(self) -> dict:
        return {
            "flagged": [int(i) for i in self.flagged],
            "flagged_labels": [self.row_labels[i] for i in self.flagged],
            "distances": [float(v) for v in self.distances],
            "threshold": self.threshold,
            "k": self.k,
            "knee_index": self.knee_index,
        }

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def to_tsv(self) -> str:
        flagged = set(self.flagged)
        rows = (
            [str(i), self.row_labels[i], d, "1" if i in flagged else "0"]
            for i, d in enumerate(self.distances)
        )
        return _tsv(["row", "repetition", "k_distance", "flagged"], rows)


def detect_outliers(matrix, k: int | None = None, sensitivity: float = 1.0) -> OutlierReport:
    """Flag rows whose k-distance exceeds the knee of the sorted k-distance curve."""
    values = _rows(matrix)
    k = default_k(values.shape[0]) if k is None else k
    dist = k_distances(values, k)
    threshold, knee = knee_threshold(np.sort(dist), sensitivity)
    if threshold is None:
        flagged = []
    else:
        flagged = [int(i) for i in np.flatnonzero(dist > threshold)]
        flagged.sort(key=lambda i: (-dist[i], i))
    labels = (
        list(matrix.row_labels) if isinstance(matrix, ErrorMatrix) else [str(i) for i in range(len(dist))]
    )
    return OutlierReport(flagged, dist, threshold, k, knee, labels)


@dataclass
class TransitionReport:
    epoch: int | None
    index: int | None
    epochs: list
    mean_error: list
    std_error: list | None
    outlier_counts: list | None


def transition_point(epochs, mean_error, std_error=None, outlier_counts=None, sensitivity: float = 1.0):
    """Knee of the mean-error curve over checkpoint epochs.

    ``mean_error`` may also be an aggregate with a ``mean`` attribute. The
    standard deviation and outlier counts are carried along for review
    without entering the decision.
    """
    if hasattr(mean_error, "mean") and not isinstance(mean_error, np.ndarray):
        if std_error is None:
            std_error = getattr(mean_error, "std", None)
        mean_error = mean_error.mean
    epochs = [int(e) for e in epochs]
    y = np.asarray(mean_error, dtype=np.float64)
    if y.shape != (len(epochs),):
        raise ValueError(f"{len(epochs)} epochs but {y.size} error values")
    idx = kneedle(y, "convex-decreasing", sensitivity)
    as_list = lambda a: None if a is None else [float(v) for v in a]
    return TransitionReport(
        None if idx is None else epochs[idx],
        idx,
        epochs,
        as_list(y),
        as_list(std_error),
        None if outlier_counts is None else [int(c) for c in outlier_counts],
    )
