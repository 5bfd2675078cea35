"""
Finding saturated repetitions from reconstruction errors
========================================================

Amplifier saturation pins a recording to a rail for part of a trial. A
model trained on clean data reconstructs such a trial badly on every
channel, so its row in the repetition-by-channel error matrix sits far from
the others. The k-th nearest neighbour distance of each row, thresholded at
the knee of the sorted distance curve, picks those rows out.

Run with ``python3 demos/02_saturation_outliers.py`` (about 30 seconds).
"""

from hvts.anomaly import default_k, detect_outliers
from hvts.dataio import ArtifactPlan, DatasetSplit, SynthConfig, synth_dataset
from hvts.evalmetrics import error_matrix, subject_summary
from hvts.training import TrainConfig, train_run

# A clean training set and a separate pool with 5% saturated repetitions.
clean = synth_dataset(SynthConfig(), 32, seed=1000)
plan = ArtifactPlan("saturation", 0.05, params=(("offset", 1000.0),))
pool = synth_dataset(SynthConfig(artifacts=(plan,)), 100, seed=0)
truth = sorted(s.repetition_index for s in pool if "artifacts" in s.meta)
print("saturated repetitions:", truth)

model, _ = train_run(DatasetSplit(clean, [], [], 0), TrainConfig(batch_size=8, epochs=30, track_dtw=False), 0)

E = error_matrix(model, pool, provenance="demo")
mean, std = subject_summary(E)
print(f"error matrix {E.shape}: mean {mean:.2f}, std of channel means {std:.2f}")

k = default_k(E.shape[0])
report = detect_outliers(E, k)
print(f"k = {k}, knee threshold = {report.threshold:.2f}")
print("flagged (most anomalous first):", report.flagged)
hits = set(report.flagged) & set(truth)
print(f"recall {len(hits) / len(truth):.2f}, precision {len(hits) / max(1, len(report.flagged)):.2f}")
