"""Reconstruction error matrices, subject summaries and Welch spectra."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .softdtw import normalized_dtw_batch

__all__ = [
    "ErrorMatrix",
    "PsdEstimate",
    "error_matrix",
    "average_error",
    "subject_summary",
    "welch_psd",
]


def _tsv(header, rows) -> str:
    buf = io.StringIO()
    buf.write("\t".join(header) + "\n")
    for row in rows:
        buf.write("\t".join(v if isinstance(v, str) else repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


@dataclass
class ErrorMatrix:
    """R x C normalized-DTW errors (repetitions by channels)."""

    values: np.ndarray
    row_labels: list = field(default_factory=list)
    col_labels: list = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"error matrix must be 2-d, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("error matrix entries must be non-negative")
        R, C = self.values.shape
        if not self.row_labels:
            self.row_labels = [str(r) for r in range(R)]
        if not self.col_labels:
            self.col_labels = [f"ch{c}" for c in range(C)]
        if len(self.row_labels) != R or len(self.col_labels) != C:
            raise ValueError("axis labels do not match the matrix shape")

    @property
    def shape(self):
        return self.values.shape

    def to_tsv(self) -> str:
        rows = ([str(lab), *vals] for lab, vals in zip(self.row_labels, self.values))
        return _tsv(["repetition", *map(str, self.col_labels)], rows)

    @classmethod
    def from_tsv(cls, text: str, provenance: str = "") -> "ErrorMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty error-matrix table")
        header = lines[0].split("\t")
        rows, values = [], []
        for n, line in enumerate(lines[1:], start=2):
            cells = line.split("\t")
            if len(cells) != len(header):
                raise ValueError(f"line {n}: expected {len(header)} fields, got {len(cells)}")
            rows.append(cells[0])
            values.append([float(c) for c in cells[1:]])
        return cls(np.array(values, dtype=float).reshape(len(rows), len(header) - 1), rows, header[1:], provenance)


@dataclass
class PsdEstimate:
    """One-sided power spectral density (units squared per Hz)."""

    frequencies: np.ndarray
    power: np.ndarray
    fs: float
    window_len: int
    overlap: int
    window: str = "hann"
    scaling: str = "density"
    single_periodogram: bool = False

    @property
    def peak_frequency(self) -> float:
        p = self.power if self.power.ndim == 1 else self.power.reshape(-1, self.power.shape[-1]).mean(0)
        return float(self.frequencies[int(np.argmax(p))])

    def to_tsv(self) -> str:
        p = np.atleast_2d(self.power).reshape(-1, self.power.shape[-1])
        header = ["frequency_hz", *(f"power_{i}" for i in range(p.shape[0]))]
        return _tsv(header, ([f, *p[:, k]] for k, f in enumerate(self.frequencies)))


def _reconstruct(model, x: np.ndarray, eps_mode: str, seed, mode: str) -> np.ndarray:
    if callable(getattr(model, "reconstruct", None)):
        return np.asarray(model.reconstruct(x, eps_mode=eps_mode, seed=seed, mode=mode))
    return np.asarray(model(x))


def error_matrix(
    model,
    segments,
    eps_mode: str = "zero",
    seed: int | None = None,
    mode: str = "with_z3",
    channel: int | None = None,
    provenance: str = "",
    batch_size: int = 64,
) -> ErrorMatrix:
    """Normalized classic-DTW of every (repetition, channel) reconstruction.

    ``model`` is anything with a ``reconstruct(x, eps_mode, seed, mode)``
    method, or a plain callable mapping (B, C, T) to (B, C, T).
    """
    if eps_mode not in ("zero", "sampled"):
        raise ValueError(f"eps_mode must be 'zero' or 'sampled', got {eps_mode!r}")
    segments = list(segments)
    x = np.stack([np.asarray(s.samples, dtype=np.float64) for s in segments])
    B, C, T = x.shape
    parts = []
    for start in range(0, B, batch_size):
        sub_seed = None if seed is None else seed + start
        parts.append(_reconstruct(model, x[start : start + batch_size], eps_mode, sub_seed, mode))
    rec = np.concatenate(parts).reshape(B, C, T)
    values = normalized_dtw_batch(x.reshape(-1, T), rec.reshape(-1, T)).reshape(B, C)
    rows = [str(getattr(s, "repetition_index", r)) for r, s in enumerate(segments)]
    return ErrorMatrix(values, rows, [f"ch{c}" for c in range(C)], provenance)


def average_error(matrices, successful=None) -> ErrorMatrix:
    """Element-wise mean over runs, optionally restricted to successful ones."""
    matrices = list(matrices)
    if successful is not None:
        matrices = [m for m, ok in zip(matrices, successful) if ok]
    if not matrices:
        raise ValueError("no matrices to average")
    shapes = {m.shape for m in matrices}
    if len(shapes) > 1:
        raise ValueError(f"matrices have different shapes {sorted(shapes)}")
    total = np.zeros(matrices[0].shape)
    for m in matrices:
        total += m.values
    first = matrices[0]
    return ErrorMatrix(total / len(matrices), list(first.row_labels), list(first.col_labels), "averaged")


def subject_summary(matrix, convention: str = "channel-means") -> tuple:
    """``(mean, std)`` of an error matrix.

    The mean is taken over all entries. With ``channel-means`` the std is the
    population std of the C per-channel means (each averaged over
    repetitions); ``all-entries`` gives the population std of every entry.
    """
    values = matrix.values if isinstance(matrix, ErrorMatrix) else np.asarray(matrix, dtype=float)
    if convention == "channel-means":
        return float(values.mean()), float(values.mean(axis=0).std())
    if convention == "all-entries":
        return float(values.mean()), float(values.std())
    raise ValueError(f"unknown convention {convention!r}")


def welch_psd(series, fs: float, window_len: int = 500, overlap: int = 250) -> PsdEstimate:
    """Averaged Hann-windowed periodograms, density scaling, one-sided.

    No detrending is applied. When ``window_len`` exceeds the series length
    a single Hann-windowed periodogram of the whole series is returned and
    ``single_periodogram`` is set.
    """
    x = np.asarray(series, dtype=np.float64)
    T = x.shape[-1]
    if window_len < 1 or not 0 <= overlap < window_len:
        raise ValueError(f"need window_len >= 1 and 0 <= overlap < window_len, got {window_len}, {overlap}")
    if window_len > T:
        f, p = signal.periodogram(x, fs=fs, window="hann", detrend=False, scaling="density", axis=-1)
        return PsdEstimate(f, p, fs, T, 0, single_periodogram=True)
    f, p = signal.welch(
        x, fs=fs, window="hann", nperseg=window_len, noverlap=overlap, detrend=False, scaling="density", axis=-1
    )
    return PsdEstimate(f, p, fs, window_len, overlap)
