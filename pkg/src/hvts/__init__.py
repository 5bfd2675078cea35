"""Hierarchical VAE reconstruction of EEG-like segments under a soft-DTW loss.

Modules
-------
gradcore
    Reverse-mode autodiff over numpy arrays with the convolution operators.
softdtw
    Classic and soft dynamic time warping with gradients.
models
    The single-latent (``v3``) and three-latent (``hv``) autoencoders.
dataio
    Segment container, synthetic generator, artifact injectors, splits.
training
    Training loop, multi-run protocol and run exclusion.
evalmetrics
    Error matrices, subject summaries and Welch spectra.
anomaly
    kNN outlier labelling with a knee threshold; transition points.
"""

__version__ = "0.1.0"
