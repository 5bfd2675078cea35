"""Training loop, learning-rate schedule, multi-run protocol and run exclusion."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import DatasetSplit, stack
from .models import ModelSpec, build_model
from .softdtw import normalized_dtw_batch

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "RunStatus",
    "TrainHistory",
    "Aggregate",
    "MultiRunResult",
    "Adam",
    "SGD",
    "lr_at",
    "infer_spec",
    "train_run",
    "multi_run",
    "mark_unsuccessful",
    "aggregate",
    "evaluate_loss",
    "segment_errors",
    "canonical_json",
    "run_seed",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 30
    lr0: float = 0.01
    epochs: int = 80
    lr_gamma: float = 0.999
    runs: int = 20
    gamma: float = 1.0
    beta: float = 1.0
    seed: int = 0
    variant: str = "hv"
    fail_threshold: float = 5.0
    optimizer: str = "adam"
    prior_mode: str = "standard"
    cost: str = "squared"
    dropout: float = 0.5
    track_dtw: bool = True
    resplit: bool = True

    def __post_init__(self):
        for name in ("batch_size", "lr0", "epochs", "lr_gamma", "runs", "gamma", "fail_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Exponential schedule ``lr0 * lr_gamma**epoch``, stepped once per epoch."""
    return cfg.lr0 * cfg.lr_gamma**epoch


def run_seed(cfg: TrainConfig, index: int) -> int:
    """Seed of run ``index`` in a multi-run experiment."""
    return int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])


def infer_spec(cfg: TrainConfig, n_channels: int, n_samples: int, fs: float) -> ModelSpec:
    """Model spec for data of the given shape.

    22 x 1000 recordings use the published architecture. Anything else uses
    the desk layout with kernels scaled to ``fs`` (half a second temporal,
    an eighth of a second separable).
    """
    common = dict(
        prior_mode=cfg.prior_mode, gamma=cfg.gamma, cost=cfg.cost, beta=cfg.beta, dropout=cfg.dropout
    )
    if (n_channels, n_samples) == (22, 1000) and cfg.variant == "hv":
        return ModelSpec(variant="hv", **common)
    return ModelSpec.desk(
        cfg.variant,
        n_channels=n_channels,
        n_samples=n_samples,
        temporal_kernel=(1, max(1, int(round(fs / 2)))),
        separable_kernel=(1, max(1, int(round(fs / 8)))),
        **common,
    )


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    """Adam with bias correction; parameters without a gradient are skipped."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self):
        for k, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.t[k] += 1
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1 ** self.t[k])
            v_hat = v / (1 - self.b2 ** self.t[k])
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_total: float
    train_recon: float
    train_kl: list
    val_total: float | None = None
    val_recon: float | None = None
    val_kl: list | None = None
    dtw_mean: float | None = None
    dtw_std: float | None = None


@dataclass(frozen=True)
class RunStatus:
    successful: bool
    reason: str | None = None

    def __str__(self):
        return "successful" if self.successful else f"unsuccessful({self.reason})"


@dataclass
class TrainHistory:
    run_seed: int
    epochs: list = field(default_factory=list)
    initial_dtw_mean: float | None = None
    status: RunStatus = RunStatus(True)
    numerical_failure: bool = False

    def __len__(self):
        return len(self.epochs)

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.epochs], dtype=float)

    @property
    def final_dtw(self) -> float:
        return self.epochs[-1].dtw_mean if self.epochs else math.nan

    def to_dict(self) -> dict:
        return {
            "run_seed": self.run_seed,
            "status": str(self.status),
            "initial_dtw_mean": self.initial_dtw_mean,
            "epochs": [asdict(r) for r in self.epochs],
        }


def _finite_or_none(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite_or_none(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite_or_none(v) for v in x]
    return x


def canonical_json(obj) -> str:
    """Sorted, compact JSON; non-finite floats become ``null``."""
    return json.dumps(_finite_or_none(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def _batches(n: int, size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield order[start : start + size]


def evaluate_loss(model, x: np.ndarray, batch_size: int):
    """Loss in inference mode (no dropout, batch-norm running stats, zero noise)."""
    was = model.training
    model.eval()
    total = recon = 0.0
    kl = None
    try:
        for idx in _batches(len(x), batch_size):
            res = model.forward(x[idx])
            _, b = model.loss(x[idx], res)
            w = len(idx) / len(x)
            total += w * b.total
            recon += w * b.reconstruction
            kl = [w * k + (kl[i] if kl else 0.0) for i, k in enumerate(b.kl_per_level)]
    finally:
        model.training = was
    return total, recon, kl


def segment_errors(model, x: np.ndarray, mode: str = "with_z3", batch_size: int = 64) -> np.ndarray:
    """(B, C) normalized DTW between each channel and its zero-noise reconstruction."""
    B, C, T = x.shape
    rec = np.concatenate([model.reconstruct(x[idx], mode=mode) for idx in _batches(B, batch_size)])
    return normalized_dtw_batch(x.reshape(-1, T), rec.reshape(-1, T)).reshape(B, C)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_run(split: DatasetSplit, cfg: TrainConfig, run_seed: int, on_epoch=None):
    """Train one model; returns ``(model, TrainHistory)``.

    Deterministic in ``(split, cfg, run_seed)``. A non-finite loss halts the
    run and marks it unsuccessful, keeping the epochs completed so far.
    ``on_epoch(model, record)`` is called after every epoch.
    """
    if not split.train:
        raise ValueError("the training set is empty")
    x = stack(split.train)
    xv = stack(split.validation) if split.validation else None
    first = split.train[0]
    spec = infer_spec(cfg, first.n_channels, first.n_samples, first.fs)
    init_seq, loop_seq = np.random.SeedSequence(run_seed).spawn(2)
    model = build_model(spec, seed=int(init_seq.generate_state(1)[0]))
    rng = np.random.default_rng(loop_seq)
    opt_cls = Adam if cfg.optimizer == "adam" else SGD
    opt = opt_cls(model.parameters(), lr=cfg.lr0)
    history = TrainHistory(run_seed)
    if cfg.track_dtw:
        history.initial_dtw_mean = float(segment_errors(model, x).mean(axis=1).mean())

    for epoch in range(cfg.epochs):
        opt.lr = lr_at(epoch, cfg)
        model.train()
        sums = None
        failed = False
        for idx in _batches(len(x), cfg.batch_size, rng.permutation(len(x))):
            model.zero_grad()
            res = model.forward(x[idx], rng=rng, sampled=True)
            loss, b = model.loss(x[idx], res)
            if not math.isfinite(b.total):
                failed = True
                break
            loss.backward()
            grads_ok = all(p.grad is None or np.all(np.isfinite(p.grad)) for p in model.parameters())
            if not grads_ok:
                failed = True
                break
            opt.step()
            w = len(idx) / len(x)
            row = np.array([b.total, b.reconstruction, *b.kl_per_level]) * w
            sums = row if sums is None else sums + row
        if failed:
            history.numerical_failure = True
            history.status = RunStatus(False, "numerical")
            break
        record = EpochRecord(epoch, opt.lr, float(sums[0]), float(sums[1]), [float(v) for v in sums[2:]])
        if xv is not None:
            vt, vr, vk = evaluate_loss(model, xv, cfg.batch_size)
            record.val_total, record.val_recon, record.val_kl = vt, vr, vk
        if cfg.track_dtw:
            per_segment = segment_errors(model, x).mean(axis=1)
            record.dtw_mean = float(per_segment.mean())
            record.dtw_std = float(per_segment.std())
            if not math.isfinite(record.dtw_mean):
                history.epochs.append(record)
                history.numerical_failure = True
                history.status = RunStatus(False, "numerical")
                break
        history.epochs.append(record)
        if on_epoch is not None:
            on_epoch(model, record)
    return model, history


# ---------------------------------------------------------------------------
# multi-run protocol
# ---------------------------------------------------------------------------


def mark_unsuccessful(history: TrainHistory, cfg: TrainConfig, peer_finals=()) -> RunStatus:
    """Numerical failure, or a final error above ``fail_threshold`` x the peer median."""
    if history.numerical_failure:
        return RunStatus(False, "numerical")
    for name in ("train_total", "dtw_mean"):
        vals = [getattr(r, name) for r in history.epochs]
        if any(v is not None and not math.isfinite(v) for v in vals):
            return RunStatus(False, "numerical")
    peers = [p for p in peer_finals if p is not None and math.isfinite(p)]
    final = history.final_dtw if history.epochs else None
    if peers and final is not None and final > cfg.fail_threshold * float(np.median(peers)):
        return RunStatus(False, "outlier-run")
    return RunStatus(True)


@dataclass
class Aggregate:
    """Per-epoch mean and population std across runs; ``empty`` when no run qualifies."""

    n_runs: int
    mean: np.ndarray | None
    std: np.ndarray | None

    @property
    def empty(self) -> bool:
        return self.n_runs == 0

    def to_dict(self):
        lst = lambda a: None if a is None else [float(v) for v in a]
        return {"n_runs": self.n_runs, "empty": self.empty, "mean": lst(self.mean), "std": lst(self.std)}


def aggregate(histories, metric: str = "dtw_mean") -> Aggregate:
    """Across-run statistics of ``metric``; epochs missing from halted runs are skipped."""
    histories = list(histories)
    if not histories:
        return Aggregate(0, None, None)
    length = max(len(h) for h in histories)
    mean, std = np.full(length, np.nan), np.full(length, np.nan)
    for e in range(length):
        vals = [getattr(h.epochs[e], metric) for h in histories if len(h) > e]
        vals = np.array([np.nan if v is None else v for v in vals], dtype=float)
        if vals.size:
            mean[e], std[e] = vals.mean(), vals.std()
    return Aggregate(len(histories), mean, std)


@dataclass
class MultiRunResult:
    histories: list
    models: list
    splits: list
    all_runs: Aggregate
    successful: Aggregate

    def successful_indices(self) -> list:
        return [i for i, h in enumerate(self.histories) if h.status.successful]


def _resplit(split: DatasetSplit, seed: int) -> DatasetSplit:
    """New train/validation partition of the pool with the same per-label counts."""
    pool = split.train + split.validation
    rng = np.random.default_rng(seed)
    val_ids = []
    for label in sorted({s.label for s in pool}):
        ids = [i for i, s in enumerate(pool) if s.label == label]
        n_val = sum(1 for s in split.validation if s.label == label)
        val_ids.extend(rng.permutation(ids)[:n_val].tolist())
    chosen = set(val_ids)
    train = [s for i, s in enumerate(pool) if i not in chosen]
    val = [pool[i] for i in sorted(chosen)]
    return DatasetSplit(train, val, split.test, seed)


def multi_run(split: DatasetSplit, cfg: TrainConfig, runs: int | None = None, on_epoch=None) -> MultiRunResult:
    """Repeat :func:`train_run` with independent seeds and aggregate the curves.

    With ``cfg.resplit`` each run draws its own train/validation partition of
    the training pool (same sizes); the test set never changes.
    """
    runs = cfg.runs if runs is None else runs
    histories, models, splits = [], [], []
    for r in range(runs):
        seed = run_seed(cfg, r)
        run_split = split
        if cfg.resplit and split.validation:
            run_split = _resplit(split, seed)
        cb = None if on_epoch is None else (lambda m, rec, r=r: on_epoch(r, m, rec))
        model, hist = train_run(run_split, cfg, seed, on_epoch=cb)
        histories.append(hist)
        models.append(model)
        splits.append(run_split)
    finals = [h.final_dtw if h.epochs and not h.numerical_failure else None for h in histories]
    for i, h in enumerate(histories):
        h.status = mark_unsuccessful(h, cfg, finals[:i] + finals[i + 1 :])
    ok = [h for h in histories if h.status.successful]
    return MultiRunResult(histories, models, splits, aggregate(histories), aggregate(ok))
