"""Acceptance suite.

Each test records one PASS/FAIL line per criterion, printed in the terminal
summary at the tolerances stated next to it. Thresholds are never relaxed to
make a criterion pass.
"""

import json
import math
import time
import zlib

import numpy as np
import pytest

from conftest import ACCEPTANCE
from helpers import max_rel_err, numerical_grad, op_gradient_error
from test_gradcore import GRAD_CASES
from test_softdtw import brute_dtw

from hvts import gradcore as gc
from hvts.anomaly import default_k, detect_outliers
from hvts.cli import main
from hvts.dataio import ArtifactPlan, DatasetSplit, SegmentTensor, SynthConfig, split, stack, synth_dataset
from hvts.evalmetrics import error_matrix, welch_psd
from hvts.models import DECODE_MODES, ModelSpec, kl_hierarchical, kl_standard, param_count
from hvts.softdtw import dtw, soft_dtw, soft_dtw_grad
from hvts.training import TrainConfig, lr_at, segment_errors, train_run

SEEDS = (0, 1, 2)

# overfit protocol for criteria 5 and 6; see the decisions ledger for the pilot runs
OVERFIT_SEGMENTS = 16
OVERFIT_CFG = dict(batch_size=2, epochs=200, dropout=0.0)


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1


def test_c01_parameter_ledgers():
    got = {v: param_count(ModelSpec(variant=v))["total"] for v in ("v3", "hv")}
    target = {"v3": 4992, "hv": 8224}
    ok = all(abs(got[v] - target[v]) <= 0.02 * target[v] for v in got)
    record(1, ok, f"v3 {got['v3']}/4992, hv {got['hv']}/8224 (exact: {got == target}; tolerance 2%)")


# ---------------------------------------------------------------- 2


def test_c02_gradient_suite():
    worst = {}
    cases = dict(GRAD_CASES)
    # a fresh generator per call freezes the mask across finite-difference probes
    cases["dropout"] = (lambda x: gc.dropout(x, 0.5, True, np.random.default_rng(5)), [(2, 3, 1, 8)])
    for name, (build, shapes) in cases.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(op_gradient_error(build, [rng.standard_normal(s) for s in shapes], rng) for _ in range(20))
    rng = np.random.default_rng(2)
    sdtw = 0.0
    for _ in range(20):
        T = int(rng.integers(2, 31))
        a, b = rng.standard_normal(T), rng.standard_normal(T)
        _, ga, gb = soft_dtw_grad(a, b, 1.0)
        na = numerical_grad(lambda: soft_dtw(a, b, 1.0), a)
        nb = numerical_grad(lambda: soft_dtw(a, b, 1.0), b)
        sdtw = max(sdtw, max_rel_err(ga, na), max_rel_err(gb, nb))
    worst["soft_dtw_grad"] = sdtw
    top = max(worst, key=worst.get)
    record(2, worst[top] < 1e-4, f"{len(worst)} ops x 20 trials, max rel err {worst[top]:.2e} ({top}) < 1e-4")


# ---------------------------------------------------------------- 3


def test_c03_dtw_oracles():
    rng = np.random.default_rng(3)
    exact = 0
    for _ in range(200):
        n, m = rng.integers(1, 9, size=2)
        a, b = rng.standard_normal(n), rng.standard_normal(m)
        exact += dtw(a, b).raw_score == brute_dtw(a, b)
    rel = []
    for _ in range(50):
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        hard = dtw(a, b).raw_score
        rel.append(abs(soft_dtw(a, b, 1e-3, cost="absolute") - hard) / hard)
    ok = exact == 200 and max(rel) < 0.01
    record(3, ok, f"enumeration exact {exact}/200; soft gamma=1e-3 max rel dev {max(rel):.2e} < 1%")


# ---------------------------------------------------------------- 4


def test_c04_kl_monte_carlo():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        d = 4
        m, lv = rng.normal(0, 1, d), rng.normal(0, 0.5, d)
        pm, plv = rng.normal(0, 1, d), rng.normal(0, 0.5, d)
        z = m + np.exp(0.5 * lv) * rng.standard_normal((100_000, d))
        log_q = -0.5 * (((z - m) ** 2) / np.exp(lv) + lv).sum(1)
        log_std = -0.5 * (z**2).sum(1)
        log_p = -0.5 * (((z - pm) ** 2) / np.exp(plv) + plv).sum(1)
        for closed, mc in (
            (kl_standard((m, lv)), np.mean(log_q - log_std)),
            (kl_hierarchical([(m, lv)], [(pm, plv)], "conditional")[0], np.mean(log_q - log_p)),
        ):
            worst = max(worst, abs(mc - closed) / closed)
    record(4, worst < 0.01, f"10 posteriors x 1e5 samples, max rel dev {worst:.2e} < 1%")


# ---------------------------------------------------------------- 5 and 6


@pytest.fixture(scope="module")
def overfit_runs():
    runs, started = [], time.perf_counter()
    for seed in SEEDS:
        segs = synth_dataset(SynthConfig(), OVERFIT_SEGMENTS, seed)
        model, hist = train_run(DatasetSplit(segs, [], [], seed), TrainConfig(**OVERFIT_CFG), seed)
        runs.append((segs, model, hist))
    return runs, time.perf_counter() - started


def test_c05_overfit_convergence(overfit_runs):
    runs, seconds = overfit_runs
    ratios = []
    for _, _, hist in runs:
        ratios.append(hist.series("dtw_mean").min() / hist.initial_dtw_mean)
    ok = all(r <= 0.1 for r in ratios) and seconds <= 600
    shown = ", ".join(f"{r:.3f}" for r in ratios)
    record(5, ok, f"best/epoch-0 DTW per seed [{shown}] <= 0.1; {seconds:.0f} s <= 600 s")


def test_c06_hierarchy_ablation(overfit_runs):
    runs, _ = overfit_runs
    started = time.perf_counter()
    ordered, total, means = 0, 0, []
    for segs, model, _ in runs:
        x = stack(segs)
        e = [segment_errors(model, x, mode).mean(axis=1) for mode in DECODE_MODES]
        ordered += int(np.sum((e[1] < e[0]) & (e[2] < e[1])))
        total += len(segs)
        means.append([float(v.mean()) for v in e])
    frac = ordered / total
    avg = np.mean(means, axis=0)
    detail = (f"strict from_z1 > with_z2 > with_z3 for {frac:.1%} of segments (need >= 90%); "
              f"mean errors {avg[0]:.3f} / {avg[1]:.3f} / {avg[2]:.3f}; {time.perf_counter() - started:.0f} s")
    record(6, frac >= 0.9, detail)


# ---------------------------------------------------------------- 7


def test_c07_anomaly_end_to_end():
    started = time.perf_counter()
    rows = []
    for seed in SEEDS:
        clean = synth_dataset(SynthConfig(), 32, 1000 + seed)
        model, _ = train_run(DatasetSplit(clean, [], [], seed),
                             TrainConfig(batch_size=8, epochs=30, track_dtw=False), seed)
        plan = ArtifactPlan("saturation", 0.05, params=(("offset", 1000.0),))
        pool = synth_dataset(SynthConfig(artifacts=(plan,)), 100, seed)
        truth = {s.repetition_index for s in pool if "artifacts" in s.meta}
        report = detect_outliers(error_matrix(model, pool), default_k(len(pool)))
        flagged = set(report.flagged)
        hits = len(flagged & truth)
        rows.append((hits / len(truth), hits / len(flagged) if flagged else 0.0))
    seconds = time.perf_counter() - started
    ok = all(r >= 0.8 and p >= 0.5 for r, p in rows) and seconds <= 600
    shown = ", ".join(f"{r:.2f}/{p:.2f}" for r, p in rows)
    record(7, ok, f"recall/precision per seed [{shown}] (need 0.8/0.5); k={default_k(100)}; {seconds:.0f} s")


# ---------------------------------------------------------------- 8


def test_c08_protocol_constants():
    cfg = TrainConfig()
    lr_ok = all(lr_at(e, cfg) == 0.01 * 0.999**e for e in range(200)) and lr_at(0, cfg) == 0.01
    segs = [SegmentTensor(np.zeros((1, 4)), 250.0, label=i % 4, repetition_index=i) for i in range(576)]
    sizes = split(segs, 0.5, 0.1, seed=0).sizes
    t = np.arange(1000) / 250.0
    est = welch_psd(np.sin(2 * np.pi * 10 * t), 250.0)
    welch_ok = (est.window_len, est.overlap, est.window) == (500, 250, "hann") and est.peak_frequency == 10.0
    ok = lr_ok and sizes == (260, 28, 288) and welch_ok
    record(8, ok, f"lr exact {lr_ok}; split {sizes}; Welch {est.window_len}/{est.overlap} {est.window}, "
                  f"peak {est.peak_frequency} Hz")


# ---------------------------------------------------------------- 9


def _pipeline(root):
    data = root / "data.hvsg"
    assert main(["synth", "--out", str(data), "--n", "24", "--seed", "5", "--channels", "4", "--samples", "128",
                 "--fs", "64", "--labels", "2"]) == 0
    assert main(["train", "--data", str(data), "--out", str(root / "run"), "--epochs", "3", "--runs", "2",
                 "--batch", "4", "--seed", "7", "--checkpoint-every", "2"]) == 0
    assert main(["score", "--data", str(data), "--run-dir", str(root / "run"), "--out", str(root / "score")]) == 0
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "timings.json")
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_c09_determinism(tmp_path):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    kinds = {k.rsplit(".", 1)[-1] for k in a}
    ok = a.keys() == b.keys() and not differing and {"hvts", "tsv", "json"} <= kinds
    record(9, ok, f"{len(a)} artifacts (manifests, checkpoints, error matrices) bitwise equal; differing: {differing}")


# ---------------------------------------------------------------- 10


def test_c10_spectral_realism():
    slopes, peaks = [], []
    for exponent in (1.0, 1.5, 2.0):
        cfg = SynthConfig(n_channels=8, n_samples=1024, fs=256, slope=exponent, alpha_gain=0.0)
        x = stack(synth_dataset(cfg, 30, 10))
        f = np.fft.rfftfreq(1024, 1 / 256)
        p = (np.abs(np.fft.rfft(x, axis=-1)) ** 2).mean(axis=(0, 1))
        band = (f >= 2) & (f <= 40)
        slopes.append(np.polyfit(np.log10(f[band]), np.log10(p[band]), 1)[0] + exponent)
    for seed in SEEDS:
        cfg = SynthConfig(n_channels=8, n_samples=1024, fs=256, alpha_gain=2.0)
        est = welch_psd(stack(synth_dataset(cfg, 30, seed)), 256.0, 512, 256)
        p = est.power.reshape(-1, est.power.shape[-1]).mean(0)
        band = (est.frequencies >= 2) & (est.frequencies <= 40)
        peaks.append(float(est.frequencies[band][np.argmax(p[band])]))
    ok = max(abs(s) for s in slopes) <= 0.2 and all(8 <= f <= 12 for f in peaks)
    record(10, ok, f"slope deviation {max(abs(s) for s in slopes):.3f} <= 0.2; alpha peaks {peaks} Hz in 8-12")
