"""``hvts`` command line: synth, train, score, detect, spectra, reconstruct.

Exit codes: 0 success, 2 usage, 3 missing input, 4 corrupt input, 5 shape
mismatch, 6 output exists (use ``--force``), 1 anything else. Errors are
printed to stderr as one JSON object ``{"error": category, "message": ...}``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

EXIT_USAGE, EXIT_MISSING, EXIT_CORRUPT, EXIT_SHAPE, EXIT_EXISTS = 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category, self.code = category, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, message)


def _version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # noqa: BLE001 - metadata is optional when running from a checkout
        return "0+unknown"


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-input", EXIT_MISSING, f"input file not found: {p}")
    return p


def _read_segments(path):
    from .dataio import SegmentFormatError, read_segments

    p = _input(path)
    try:
        return read_segments(p)
    except (SegmentFormatError, ValueError) as exc:
        raise CliError("corrupt-input", EXIT_CORRUPT, f"{p}: {exc}") from exc


def _load_model(path):
    from .models import CheckpointError, load_checkpoint

    p = _input(path)
    try:
        return load_checkpoint(p)
    except (CheckpointError, ValueError) as exc:
        raise CliError("corrupt-input", EXIT_CORRUPT, f"{p}: {exc}") from exc


def _check_shape(model, segments):
    s = model.spec
    for seg in segments:
        if (seg.n_channels, seg.n_samples) != (s.n_channels, s.n_samples):
            raise CliError(
                "shape-mismatch",
                EXIT_SHAPE,
                f"model expects {s.n_channels} x {s.n_samples} segments, "
                f"repetition {seg.repetition_index} is {seg.n_channels} x {seg.n_samples}",
            )


def _output_file(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise CliError("output-exists", EXIT_EXISTS, f"{p} exists; pass --force to overwrite")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _output_dir(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()):
        if not force:
            raise CliError("output-exists", EXIT_EXISTS, f"{p} is not empty; pass --force to overwrite")
        shutil.rmtree(p)
    for sub in ("checkpoints", "metrics", "plots"):
        (p / sub).mkdir(parents=True, exist_ok=True)
    return p


def _write(path: Path, data) -> None:
    """Atomic write through a temporary sibling."""
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _manifest(command, config, inputs, extra=None) -> str:
    from .training import canonical_json

    body = {
        "command": command,
        "config": config,
        "inputs": {Path(p).name: _digest(Path(p)) for p in inputs},
        "tool_version": _version(),
    }
    body.update(extra or {})
    return canonical_json(body) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .dataio import ArtifactPlan, SynthConfig, synth_dataset, write_segments

    plans = []
    if args.saturation_rate:
        plans.append(
            ArtifactPlan(
                "saturation",
                args.saturation_rate,
                params=(("rail_level", args.rail), ("offset", args.rail_offset), ("duration", args.saturation_len)),
            )
        )
    if args.line_noise_rate:
        plans.append(ArtifactPlan("line_noise", args.line_noise_rate, params=(("amplitude", args.line_amplitude),)))
    if args.muscle_rate:
        plans.append(ArtifactPlan("muscle", args.muscle_rate, params=(("gain", args.muscle_gain),)))
    try:
        cfg = SynthConfig(
            n_channels=args.channels,
            n_samples=args.samples,
            fs=args.fs,
            slope=args.slope,
            alpha_gain=args.alpha_gain,
            beta_gain=args.beta_gain,
            n_labels=args.labels,
            subject_id=args.subject,
            artifacts=tuple(plans),
        )
    except ValueError as exc:
        raise CliError("usage", EXIT_USAGE, str(exc)) from exc
    out = _output_file(args.out, args.force)
    write_segments(out, synth_dataset(cfg, args.n, args.seed))
    return 0


def _train_config(args):
    from .training import TrainConfig

    try:
        return TrainConfig(
            batch_size=args.batch,
            lr0=args.lr,
            epochs=args.epochs,
            lr_gamma=args.gamma_lr,
            runs=args.runs,
            gamma=args.gamma_dtw,
            beta=args.beta,
            seed=args.seed,
            variant=args.variant,
            prior_mode=args.prior,
            optimizer=args.optimizer,
            dropout=args.dropout,
        )
    except ValueError as exc:
        raise CliError("usage", EXIT_USAGE, str(exc)) from exc


def cmd_train(args) -> int:
    from .dataio import split
    from .models import save_checkpoint
    from .svg import line_plot
    from .training import aggregate, canonical_json, multi_run

    cfg = _train_config(args)
    segments = _read_segments(args.data)
    if len({(s.n_channels, s.n_samples) for s in segments}) > 1:
        raise CliError("shape-mismatch", EXIT_SHAPE, "segments have different shapes")
    try:
        ds = split(segments, args.train_frac, args.val_frac, seed=args.seed)
    except ValueError as exc:
        raise CliError("shape-mismatch", EXIT_SHAPE, str(exc)) from exc
    out = _output_dir(args.out, args.force)
    ckpt_dir = out / "checkpoints"
    started = time.perf_counter()
    epoch_times = []

    def on_epoch(run, model, record):
        epoch_times.append(time.perf_counter())
        done = record.epoch + 1
        if args.checkpoint_every and done % args.checkpoint_every == 0 and done != cfg.epochs:
            _write(ckpt_dir / f"run{run:02d}_epoch{done:04d}.hvts", _ckpt_bytes(model))

    def _ckpt_bytes(model):
        from .models import checkpoint_bytes

        return checkpoint_bytes(model)

    try:
        result = multi_run(ds, cfg, on_epoch=on_epoch)
    except ValueError as exc:
        raise CliError("shape-mismatch", EXIT_SHAPE, str(exc)) from exc
    runs = []
    for r, (model, hist) in enumerate(zip(result.models, result.histories)):
        name = f"run{r:02d}_epoch{len(hist):04d}.hvts"
        save_checkpoint(model, ckpt_dir / name)
        _write(out / "metrics" / f"history_run{r:02d}.json", canonical_json(hist.to_dict()) + "\n")
        runs.append({"run": r, "seed": hist.run_seed, "status": str(hist.status), "checkpoint": name,
                     "epochs": len(hist), "final_dtw": hist.final_dtw if hist.epochs else None})
    agg = {"all_runs": result.all_runs.to_dict(), "successful": result.successful.to_dict(),
           "all_runs_train_total": aggregate(result.histories, "train_total").to_dict()}
    _write(out / "metrics" / "aggregate.json", canonical_json(agg) + "\n")
    index = {id(s): i for i, s in enumerate(segments)}
    split_ids = {
        "test": [index[id(s)] for s in ds.test],
        "runs": [
            {"train": [index[id(s)] for s in sp.train], "validation": [index[id(s)] for s in sp.validation]}
            for sp in result.splits
        ],
    }
    _write(out / "metrics" / "split.json", canonical_json(split_ids) + "\n")
    curves = {"mean (all runs)": result.all_runs.mean}
    if not result.successful.empty:
        curves["mean (successful runs)"] = result.successful.mean
    _write(out / "plots" / "training_curve.svg",
           line_plot(curves, "normalized DTW on the training set", "epoch", "error"))
    config = {**asdict(cfg), "train_frac": args.train_frac, "val_frac": args.val_frac,
              "checkpoint_every": args.checkpoint_every}
    _write(out / "manifest.json", _manifest("train", config, [args.data], {"runs": runs}))
    total = time.perf_counter() - started
    _write(out / "timings.json", json.dumps({"wall_seconds": total, "epochs_timed": len(epoch_times)}) + "\n")
    return 0


def cmd_score(args) -> int:
    from .evalmetrics import average_error, error_matrix, subject_summary
    from .svg import heatmap
    from .training import canonical_json

    segments = _read_segments(args.data)
    checkpoints, successful = [], []
    if args.run_dir:
        run_dir = Path(args.run_dir)
        manifest = json.loads(_input(run_dir / "manifest.json").read_text())
        for run in manifest["runs"]:
            name = run["checkpoint"] if args.epoch is None else f"run{run['run']:02d}_epoch{args.epoch:04d}.hvts"
            checkpoints.append(run_dir / "checkpoints" / name)
            successful.append(run["status"] == "successful")
        if args.subset != "all":
            ids = json.loads(_input(run_dir / "metrics" / "split.json").read_text())
            if args.subset == "test":
                pick = ids["test"]
            else:
                pick = ids["runs"][0][args.subset]
            if max(pick, default=-1) >= len(segments):
                raise CliError("shape-mismatch", EXIT_SHAPE, "split indices exceed the data file")
            segments = [segments[i] for i in pick]
    else:
        checkpoints = [Path(c) for c in args.checkpoint]
        successful = [True] * len(checkpoints)
    if not checkpoints:
        raise CliError("usage", EXIT_USAGE, "give --checkpoint or --run-dir")
    out = _output_dir(args.out, args.force)
    matrices = []
    for r, ckpt in enumerate(checkpoints):
        model = _load_model(ckpt)
        _check_shape(model, segments)
        m = error_matrix(model, segments, args.eps, args.seed, provenance=f"run{r:02d}")
        matrices.append(m)
        _write(out / "metrics" / f"E_run{r:02d}.tsv", m.to_tsv())
    try:
        mean_matrix = average_error(matrices, successful)
    except ValueError as exc:
        raise CliError("no-successful-runs", 1, str(exc)) from exc
    _write(out / "metrics" / "E_mean.tsv", mean_matrix.to_tsv())
    mean, std = subject_summary(mean_matrix)
    _, std_all = subject_summary(mean_matrix, "all-entries")
    summary = {"mean": mean, "std_channel_means": std, "std_all_entries": std_all,
               "runs_averaged": int(sum(successful)), "rows": mean_matrix.shape[0]}
    _write(out / "metrics" / "summary.json", canonical_json(summary) + "\n")
    _write(out / "plots" / "E_mean.svg", heatmap(mean_matrix.values, "mean error matrix"))
    config = {"eps": args.eps, "seed": args.seed, "subset": args.subset, "epoch": args.epoch}
    inputs = [args.data, *checkpoints]
    _write(out / "manifest.json", _manifest("score", config, inputs, {"summary": summary}))
    return 0


def cmd_detect(args) -> int:
    from .anomaly import detect_outliers
    from .evalmetrics import ErrorMatrix

    path = _input(args.matrix)
    try:
        matrix = ErrorMatrix.from_tsv(path.read_text())
    except ValueError as exc:
        raise CliError("corrupt-input", EXIT_CORRUPT, f"{path}: {exc}") from exc
    try:
        report = detect_outliers(matrix, args.k)
    except ValueError as exc:
        raise CliError("shape-mismatch", EXIT_SHAPE, str(exc)) from exc
    out = _output_file(args.out, args.force)
    _write(out, report.to_json() + "\n")
    if args.tsv:
        _write(_output_file(args.tsv, args.force), report.to_tsv())
    return 0


def cmd_spectra(args) -> int:
    import numpy as np

    from .evalmetrics import welch_psd
    from .svg import line_plot

    segments = _read_segments(args.data)
    sources = {"original": segments}
    if args.reconstructions:
        rec = _read_segments(args.reconstructions)
        if [s.samples.shape for s in rec] != [s.samples.shape for s in segments]:
            raise CliError("shape-mismatch", EXIT_SHAPE, "reconstructions do not match the data shapes")
        sources["reconstruction"] = rec
    out = _output_dir(args.out, args.force)
    curves, freqs = {}, None
    for name, segs in sources.items():
        if args.segment is not None:
            if not 0 <= args.segment < len(segs):
                raise CliError("shape-mismatch", EXIT_SHAPE, f"segment {args.segment} out of range")
            segs = [segs[args.segment]]
        x = np.stack([s.samples.astype(np.float64) for s in segs])
        if args.channel is not None:
            if not 0 <= args.channel < x.shape[1]:
                raise CliError("shape-mismatch", EXIT_SHAPE, f"channel {args.channel} out of range")
            x = x[:, args.channel : args.channel + 1]
        psd = welch_psd(x, segs[0].fs, args.window, args.overlap)
        psd.power = psd.power.mean(axis=(0, 1))
        freqs = psd.frequencies
        curves[name] = psd.power
        _write(out / "metrics" / f"psd_{name}.tsv", psd.to_tsv())
        if psd.single_periodogram:
            print(json.dumps({"warning": "window longer than segment; single periodogram used"}), file=sys.stderr)
    _write(out / "plots" / "psd.svg", line_plot(curves, "Welch PSD", "frequency (Hz)", "power", x=freqs, logy=True))
    config = {"window": args.window, "overlap": args.overlap, "segment": args.segment, "channel": args.channel}
    inputs = [args.data] + ([args.reconstructions] if args.reconstructions else [])
    _write(out / "manifest.json", _manifest("spectra", config, inputs))
    return 0


def cmd_reconstruct(args) -> int:
    from dataclasses import replace

    from .dataio import write_segments

    model = _load_model(args.checkpoint)
    segments = _read_segments(args.data)
    _check_shape(model, segments)
    mode = {"z1": "from_z1", "z2": "with_z2", "z3": "with_z3"}[args.level]
    if model.spec.variant == "v3" and mode != "from_z1":
        raise CliError("usage", EXIT_USAGE, "the v3 variant has a single latent space; use --level z1")
    import numpy as np

    x = np.stack([s.samples.astype(np.float64) for s in segments])
    rec = model.reconstruct(x, eps_mode=args.eps, seed=args.seed, mode=mode)
    out = _output_file(args.out, args.force)
    write_segments(out, [replace(s, samples=r, meta={**s.meta, "level": args.level}) for s, r in zip(segments, rec)])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hvts", description="Hierarchical VAE reconstruction of EEG-like segments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic HVSG segment file")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--samples", type=int, default=256)
    s.add_argument("--fs", type=float, default=128.0)
    s.add_argument("--slope", type=float, default=1.0)
    s.add_argument("--alpha-gain", type=float, default=0.5)
    s.add_argument("--beta-gain", type=float, default=0.0)
    s.add_argument("--labels", type=int, default=4)
    s.add_argument("--subject", type=int, default=0)
    s.add_argument("--saturation-rate", type=float, default=0.0)
    s.add_argument("--saturation-len", type=int, default=128)
    s.add_argument("--rail", type=float, default=200.0)
    s.add_argument("--rail-offset", type=float, default=1000.0)
    s.add_argument("--line-noise-rate", type=float, default=0.0)
    s.add_argument("--line-amplitude", type=float, default=10.0)
    s.add_argument("--muscle-rate", type=float, default=0.0)
    s.add_argument("--muscle-gain", type=float, default=5.0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train models over several seeded runs")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=("v3", "hv"), default="hv")
    t.add_argument("--epochs", type=int, default=80)
    t.add_argument("--runs", type=int, default=20)
    t.add_argument("--batch", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--gamma-lr", type=float, default=0.999)
    t.add_argument("--gamma-dtw", type=float, default=1.0)
    t.add_argument("--beta", type=float, default=1.0)
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--prior", choices=("standard", "conditional"), default="standard")
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--train-frac", type=float, default=0.5)
    t.add_argument("--val-frac", type=float, default=0.1)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("score", help="error matrices of trained models")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--run-dir")
    src.add_argument("--checkpoint", nargs="+")
    c.add_argument("--subset", choices=("all", "train", "validation", "test"), default="all")
    c.add_argument("--epoch", type=int, default=None)
    c.add_argument("--eps", choices=("zero", "sampled"), default="zero")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_score)

    d = sub.add_parser("detect", help="kNN outlier detection on an error matrix")
    d.add_argument("--matrix", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--k", type=int, default=15)
    d.add_argument("--tsv")
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_detect)

    w = sub.add_parser("spectra", help="Welch spectra of segments and reconstructions")
    w.add_argument("--data", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--reconstructions")
    w.add_argument("--window", type=int, default=500)
    w.add_argument("--overlap", type=int, default=250)
    w.add_argument("--segment", type=int, default=None)
    w.add_argument("--channel", type=int, default=None)
    w.add_argument("--force", action="store_true")
    w.set_defaults(func=cmd_spectra)

    r = sub.add_parser("reconstruct", help="decode segments at a chosen hierarchy level")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--level", choices=("z1", "z2", "z3"), default="z3")
    r.add_argument("--eps", choices=("zero", "sampled"), default="zero")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_reconstruct)
    return p


def _apply_thread_cap():
    threads = os.environ.get("HVTS_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def main(argv=None) -> int:
    _apply_thread_cap()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - report anything else as exit 1
        print(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
