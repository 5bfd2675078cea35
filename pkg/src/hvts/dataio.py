"""Segments, a synthetic EEG-like generator, artifact injectors and the HVSG container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "SegmentTensor",
    "DatasetSplit",
    "ArtifactPlan",
    "SynthConfig",
    "SegmentFormatError",
    "synth_dataset",
    "inject_saturation",
    "inject_line_noise",
    "inject_muscle",
    "split",
    "stack",
    "read_segments",
    "write_segments",
]

MAGIC = b"HVSG"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_SEG_HEADER = struct.Struct("<IIfIII")


@dataclass
class SegmentTensor:
    """One EEG repetition: ``samples`` is a C x T float32 array in microvolts.

    ``meta`` carries free-form JSON metadata (for example injected artifacts)
    that travels in the container's sidecar file.
    """

    samples: np.ndarray
    fs: float
    label: int = 0
    subject_id: int = 0
    repetition_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"samples must be a non-empty C x T matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        self.samples = arr

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples, **meta) -> "SegmentTensor":
        return replace(self, samples=samples, meta={**self.meta, **meta})


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    split_seed: int

    @property
    def sizes(self) -> tuple:
        return len(self.train), len(self.validation), len(self.test)


@dataclass(frozen=True)
class ArtifactPlan:
    """Artifact injected into a fraction ``rate`` of generated segments.

    ``kind`` is ``saturation``, ``line_noise`` or ``muscle``. ``channels=None``
    hits every channel. ``params`` are forwarded to the injector.
    """

    kind: str
    rate: float
    channels: tuple | None = None
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in _INJECTORS:
            raise ValueError(f"unknown artifact kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"artifact rate must lie in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class SynthConfig:
    """Spectral recipe of the surrogate EEG.

    The power spectrum is ``f**-slope`` plus Gaussian bumps at the alpha and
    beta frequencies (gains relative to the 1/f level at 1 Hz) plus a flat
    ``noise_floor``. Segments are rescaled to ``rms_uv`` per channel on average.
    """

    n_channels: int = 8
    n_samples: int = 256
    fs: float = 128.0
    slope: float = 1.0
    alpha_freq: float = 10.0
    alpha_gain: float = 0.5
    alpha_width: float = 1.0
    beta_freq: float = 20.0
    beta_gain: float = 0.0
    beta_width: float = 2.0
    noise_floor: float = 0.0
    rms_uv: float = 20.0
    n_labels: int = 4
    subject_id: int = 0
    artifacts: tuple = ()

    def __post_init__(self):
        nyq = self.fs / 2
        if self.n_channels < 1 or self.n_samples < 2 or self.fs <= 0:
            raise ValueError("need n_channels >= 1, n_samples >= 2 and fs > 0")
        for name in ("alpha_freq", "beta_freq"):
            if not 0 < getattr(self, name) < nyq:
                raise ValueError(f"{name}={getattr(self, name)} must lie in (0, {nyq})")
        for name in ("alpha_gain", "beta_gain", "noise_floor", "rms_uv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_labels < 1:
            raise ValueError("n_labels must be at least 1")

    def power_profile(self, freqs: np.ndarray) -> np.ndarray:
        f = np.asarray(freqs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            base = np.where(f > 0, np.abs(f) ** -self.slope, 0.0)
        bump = lambda f0, w: np.exp(-0.5 * ((f - f0) / w) ** 2)
        psd = base + self.alpha_gain * bump(self.alpha_freq, self.alpha_width)
        psd = psd + self.beta_gain * bump(self.beta_freq, self.beta_width) + self.noise_floor
        psd[f == 0] = 0.0
        return psd


class SegmentFormatError(ValueError):
    """Malformed HVSG container; the message names the byte offset."""


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def _shaped_noise(rng, n_channels, n_samples, fs, profile):
    freqs = np.fft.rfftfreq(n_samples, 1.0 / fs)
    amp = np.sqrt(profile(freqs))
    spec = rng.standard_normal((n_channels, freqs.size)) + 1j * rng.standard_normal((n_channels, freqs.size))
    return np.fft.irfft(spec * amp, n=n_samples, axis=1)


def synth_dataset(cfg: SynthConfig, n_segments: int, seed: int) -> list:
    """Generate ``n_segments`` segments with independent random phases per channel.

    Labels cycle through ``range(cfg.n_labels)``. Artifacts from ``cfg.artifacts``
    hit a seeded random subset of ``round(rate * n_segments)`` segments and are
    recorded in ``meta["artifacts"]``.
    """
    rng = np.random.default_rng(seed)
    freqs = np.fft.rfftfreq(cfg.n_samples, 1.0 / cfg.fs)
    # expected per-sample variance of irfft(spec * amp), used for scaling
    weights = np.full(freqs.size, 4.0)
    weights[0] = 1.0
    if cfg.n_samples % 2 == 0:
        weights[-1] = 1.0
    variance = (weights * cfg.power_profile(freqs)).sum() / cfg.n_samples**2
    scale = cfg.rms_uv / np.sqrt(variance) if variance > 0 else 0.0
    segments = []
    for i in range(n_segments):
        x = _shaped_noise(rng, cfg.n_channels, cfg.n_samples, cfg.fs, cfg.power_profile) * scale
        segments.append(
            SegmentTensor(x, cfg.fs, i % cfg.n_labels, cfg.subject_id, i, meta={})
        )
    for plan in cfg.artifacts:
        count = int(round(plan.rate * n_segments))
        hit = np.sort(rng.choice(n_segments, size=count, replace=False)) if count else []
        for i in hit:
            segments[i] = _apply_plan(segments[i], plan, rng)
    return segments


def _apply_plan(seg: SegmentTensor, plan: ArtifactPlan, rng) -> SegmentTensor:
    params = dict(plan.params)
    if plan.kind == "saturation":
        duration = int(params.pop("duration", seg.n_samples // 2))
        start = int(params.pop("start", rng.integers(0, seg.n_samples - duration + 1)))
        out = inject_saturation(seg, start, duration, channels=plan.channels, **params)
    elif plan.kind == "line_noise":
        out = inject_line_noise(seg, channels=plan.channels, **params)
    else:
        out = inject_muscle(seg, seed=int(rng.integers(2**31)), channels=plan.channels, **params)
    record = {"kind": plan.kind, "channels": None if plan.channels is None else list(plan.channels)}
    return replace(out, meta={**seg.meta, "artifacts": seg.meta.get("artifacts", []) + [record]})


# ---------------------------------------------------------------------------
# artifact injectors
# ---------------------------------------------------------------------------


def _channel_index(seg, channels):
    if channels is None:
        return np.arange(seg.n_channels)
    idx = np.asarray(channels, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= seg.n_channels):
        raise ValueError(f"channel index out of range for {seg.n_channels} channels")
    return idx


def inject_saturation(
    seg: SegmentTensor,
    start: int,
    duration: int,
    rail_level: float = 200.0,
    channels=None,
    gain: float = 1.0,
    offset: float = 0.0,
) -> SegmentTensor:
    """Clip ``gain * x + offset`` to ``[-rail_level, rail_level]`` over a span.

    A large ``offset`` drives the span onto a rail, producing the flat runs of
    an amplifier in saturation. Samples outside the span or the selected
    channels are untouched.
    """
    if rail_level <= 0:
        raise ValueError("rail_level must be positive")
    if start < 0 or duration < 0 or start + duration > seg.n_samples:
        raise ValueError(f"span [{start}, {start + duration}) outside 0..{seg.n_samples}")
    out = seg.samples.copy()
    if duration == 0:
        return replace(seg, samples=out, meta=dict(seg.meta))
    rows = _channel_index(seg, channels)
    span = out[rows, start : start + duration].astype(np.float64)
    out[rows, start : start + duration] = np.clip(gain * span + offset, -rail_level, rail_level)
    return replace(seg, samples=out, meta=dict(seg.meta))


def inject_line_noise(
    seg: SegmentTensor, f0: float = 50.0, amplitude: float = 10.0, channels=None, phase: float = 0.0
) -> SegmentTensor:
    """Add a sinusoid of ``amplitude`` microvolts at ``f0`` Hz."""
    if not 0 < f0 < seg.fs / 2:
        raise ValueError(f"f0={f0} must lie below the Nyquist frequency {seg.fs / 2}")
    out = seg.samples.copy()
    if amplitude == 0:
        return replace(seg, samples=out, meta=dict(seg.meta))
    rows = _channel_index(seg, channels)
    t = np.arange(seg.n_samples) / seg.fs
    out[rows] = out[rows] + amplitude * np.sin(2 * np.pi * f0 * t + phase)
    return replace(seg, samples=out, meta=dict(seg.meta))


def inject_muscle(
    seg: SegmentTensor, band=(20.0, 90.0), gain: float = 5.0, seed: int = 0, channels=None
) -> SegmentTensor:
    """Add band-limited white noise with RMS ``gain`` microvolts.

    The band is clipped at the Nyquist frequency.
    """
    lo, hi = float(band[0]), min(float(band[1]), seg.fs / 2)
    if not 0 <= lo < hi:
        raise ValueError(f"empty band {band} at fs={seg.fs}")
    out = seg.samples.copy()
    if gain == 0:
        return replace(seg, samples=out, meta=dict(seg.meta))
    rows = _channel_index(seg, channels)
    freqs = np.fft.rfftfreq(seg.n_samples, 1.0 / seg.fs)
    mask = ((freqs >= lo) & (freqs <= hi)).astype(float)
    noise = _shaped_noise(np.random.default_rng(seed), rows.size, seg.n_samples, seg.fs, lambda f: mask)
    rms = np.sqrt(np.mean(noise**2, axis=1, keepdims=True))
    noise = gain * noise / np.where(rms > 0, rms, 1.0)
    out[rows] = out[rows] + noise
    return replace(seg, samples=out, meta=dict(seg.meta))


_INJECTORS = {"saturation": inject_saturation, "line_noise": inject_line_noise, "muscle": inject_muscle}


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split(segments, train_frac: float = 0.5, val_frac_of_train: float = 0.1, seed: int = 0) -> DatasetSplit:
    """Stratified train/validation/test split.

    Per label: the training pool holds ``floor(n * train_frac)`` segments and
    the validation set ``floor(pool * val_frac_of_train)`` of them; the rest
    of the label is test data.
    """
    segments = list(segments)
    if not segments:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    labels = sorted({s.label for s in segments})
    train, val, test = [], [], []
    for label in labels:
        idx = [i for i, s in enumerate(segments) if s.label == label]
        n_pool = int(np.floor(len(idx) * train_frac))
        if n_pool < 1 or n_pool >= len(idx):
            raise ValueError(
                f"label {label} has {len(idx)} segments; too few to stratify with train_frac={train_frac}"
            )
        order = rng.permutation(idx)
        n_val = int(np.floor(n_pool * val_frac_of_train))
        val.extend(order[:n_val])
        train.extend(order[n_val:n_pool])
        test.extend(order[n_pool:])
    pick = lambda ids: [segments[i] for i in sorted(ids)]
    return DatasetSplit(pick(train), pick(val), pick(test), seed)


def stack(segments) -> np.ndarray:
    """(B, C, T) float64 array of the segments' samples."""
    return np.stack([np.asarray(s.samples, dtype=np.float64) for s in segments])


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_segments(path, segments) -> None:
    """Write the HVSG container; metadata, when present, goes to ``<path>.json``."""
    path = Path(path)
    segments = list(segments)
    channels = {s.n_channels for s in segments}
    if len(channels) > 1:
        raise SegmentFormatError(f"mixed channel counts {sorted(channels)} in one file")
    chunks = [_HEADER.pack(MAGIC, VERSION, len(segments))]
    for s in segments:
        chunks.append(
            _SEG_HEADER.pack(s.n_channels, s.n_samples, s.fs, s.label, s.subject_id, s.repetition_index)
        )
        chunks.append(np.ascontiguousarray(s.samples, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    side = _sidecar(path)
    if any(s.meta for s in segments):
        side.write_text(json.dumps([s.meta for s in segments], sort_keys=True, separators=(",", ":")))
    elif side.exists():
        side.unlink()


def read_segments(path) -> list:
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise SegmentFormatError(
                f"truncated file: {what} at byte {pos} needs {pos + n} bytes, file has {len(data)}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    magic, version, count = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise SegmentFormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise SegmentFormatError(f"unsupported version {version} at byte 4")
    side = _sidecar(path)
    metas = json.loads(side.read_text()) if side.exists() else [{}] * count
    if len(metas) != count:
        raise SegmentFormatError(f"sidecar holds {len(metas)} entries for {count} segments")
    out = []
    first_c = None
    for k in range(count):
        at = pos
        c, t, fs, label, subject, rep = _SEG_HEADER.unpack(take(_SEG_HEADER.size, f"segment {k} header"))
        if c < 1 or t < 1 or not fs > 0:
            raise SegmentFormatError(f"segment {k} header at byte {at}: C={c}, T={t}, fs={fs}")
        if first_c is None:
            first_c = c
        elif c != first_c:
            raise SegmentFormatError(f"segment {k} at byte {at} has C={c}, file started with C={first_c}")
        samples = np.frombuffer(take(4 * c * t, f"segment {k} samples"), dtype="<f4").reshape(c, t)
        out.append(SegmentTensor(samples.astype(np.float32), float(fs), label, subject, rep, dict(metas[k])))
    if pos != len(data):
        raise SegmentFormatError(f"{len(data) - pos} trailing bytes after byte {pos}")
    return out
