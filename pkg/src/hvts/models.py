"""vEEGNet-ver3 and hvEEGNet autoencoders built on :mod:`hvts.gradcore`.

Both share an EEGNet-style encoder (temporal, spatial and separable blocks) and
a mirrored transposed-convolution decoder. ``v3`` has a single latent space
after the separable block; ``hv`` has three (``z1`` after the separable
block, ``z2`` after the spatial block, ``z3`` after the temporal block) whose
samples are added to the decoder stream at the matching depth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .softdtw import soft_dtw_loss

__all__ = [
    "ModelSpec",
    "LatentLevel",
    "LatentBundle",
    "LossBreakdown",
    "ForwardResult",
    "VEEGNet",
    "HVEEGNet",
    "build_model",
    "kl_normal",
    "kl_standard",
    "kl_hierarchical",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "DECODE_MODES",
]

DECODE_MODES = ("from_z1", "with_z2", "with_z3")
CHECKPOINT_MAGIC = b"HVTS"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``pools`` holds the average-pooling windows after the spatial and the
    separable block; ``(1, 1)`` means no pooling. The spatial kernel always
    spans all electrodes, so it is derived from ``n_channels``.

    ``n_samples`` defaults to 1000 for ``hv`` and to 1024 for ``v3``, whose
    total pooling of 32 does not divide 1000. Parameter counts do not depend
    on it.
    """

    variant: str = "hv"
    n_channels: int = 22
    n_samples: int | None = None
    temporal_kernel: tuple = (1, 128)
    separable_kernel: tuple = (1, 32)
    depths: tuple = (1, 8, 16)
    pools: tuple | None = None
    dropout: float = 0.5
    prior_mode: str = "standard"
    gamma: float = 1.0
    cost: str = "squared"
    beta: float = 1.0
    upsample_mode: str = "nearest"

    def __post_init__(self):
        if self.variant not in ("v3", "hv"):
            raise ValueError(f"variant must be 'v3' or 'hv', got {self.variant!r}")
        if self.prior_mode not in ("standard", "conditional"):
            raise ValueError(f"prior_mode must be 'standard' or 'conditional', got {self.prior_mode!r}")
        if self.prior_mode == "conditional" and self.variant != "hv":
            raise ValueError("conditional priors exist only for the hv variant")
        if self.upsample_mode != "nearest":
            raise ValueError("only nearest-neighbour upsampling is implemented")
        pools = self.pools
        if pools is None:
            pools = ((1, 4), (1, 8)) if self.variant == "v3" else ((1, 1), (1, 10))
        if self.n_samples is None:
            object.__setattr__(self, "n_samples", 1024 if self.variant == "v3" else 1000)
        object.__setattr__(self, "pools", tuple(tuple(int(v) for v in p) for p in pools))
        for name in ("temporal_kernel", "separable_kernel", "depths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.depths[0] != 1:
            raise ValueError("input depth must be 1")
        if self.depths[2] % self.depths[1]:
            raise ValueError("spatial depth must be a multiple of the temporal depth")
        if self.n_samples % self.total_pool:
            raise ValueError(
                f"n_samples={self.n_samples} is not divisible by the total pooling {self.total_pool}"
            )

    @property
    def spatial_kernel(self) -> tuple:
        return (self.n_channels, 1)

    @property
    def total_pool(self) -> int:
        return self.pools[0][1] * self.pools[1][1]

    @property
    def latent_samples(self) -> int:
        return self.n_samples // self.total_pool

    @classmethod
    def desk(cls, variant: str = "hv", **overrides) -> "ModelSpec":
        """Desk-scale spec: 8 channels x 256 samples at 128 Hz.

        Kernels keep their duration in seconds (half a second temporal, a
        quarter second separable) and the hv pool becomes (1, 8) so that it
        divides 256.
        """
        pools = ((1, 4), (1, 8)) if variant == "v3" else ((1, 1), (1, 8))
        base = dict(
            variant=variant,
            n_channels=8,
            n_samples=256,
            temporal_kernel=(1, 64),
            separable_kernel=(1, 16),
            pools=pools,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "pools" else list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["pools"] = tuple(tuple(p) for p in d["pools"])
        for k in ("temporal_kernel", "separable_kernel", "depths"):
            d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class LatentLevel:
    """Posterior of one latent space and its draw ``z = mean + exp(log_var / 2) * eps``."""

    name: str
    mean: Tensor
    log_var: Tensor
    eps: np.ndarray | None = None
    z: Tensor | None = None


@dataclass
class LatentBundle:
    levels: list = field(default_factory=list)

    def __getitem__(self, name: str) -> LatentLevel:
        for level in self.levels:
            if level.name == name:
                return level
        raise KeyError(name)

    @property
    def names(self) -> list:
        return [lv.name for lv in self.levels]


@dataclass(frozen=True)
class LossBreakdown:
    reconstruction: float
    kl_per_level: tuple
    total: float


@dataclass
class ForwardResult:
    recon: Tensor
    posterior: LatentBundle
    priors: list  # (mean, log_var) per level, or None for N(0, I)
    recon_per_segment: np.ndarray | None = None


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class _Conv:
    def __init__(self, name, cin, cout, kernel, groups=1, bias=False, pad="valid", transposed=False):
        self.name = name
        self.groups = groups
        self.pad = pad
        self.transposed = transposed
        kh, kw = kernel
        shape = (cin, cout // groups, kh, kw) if transposed else (cout, cin // groups, kh, kw)
        self.weight = Tensor(np.zeros(shape), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def params(self):
        yield f"{self.name}.weight", self.weight
        if self.bias is not None:
            yield f"{self.name}.bias", self.bias

    def init(self, rng: np.random.Generator):
        w = self.weight.data
        bound = 1.0 / np.sqrt(w.shape[1] * w.shape[2] * w.shape[3])
        w[...] = rng.uniform(-bound, bound, w.shape)
        if self.bias is not None:
            self.bias.data[...] = rng.uniform(-bound, bound, self.bias.shape)

    def __call__(self, x):
        fn = gc.transpose_conv2d if self.transposed else gc.conv2d
        return fn(x, self.weight, self.bias, groups=self.groups, pad=self.pad)


class _BatchNorm:
    def __init__(self, name, depth):
        self.name = name
        self.scale = Tensor(np.ones(depth), requires_grad=True)
        self.shift = Tensor(np.zeros(depth), requires_grad=True)
        self.running_mean = np.zeros(depth)
        self.running_var = np.ones(depth)

    def params(self):
        yield f"{self.name}.scale", self.scale
        yield f"{self.name}.shift", self.shift

    def buffers(self):
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var

    def init(self, rng):
        pass

    def __call__(self, x, training):
        return gc.batch_norm(x, self.scale, self.shift, self.running_mean, self.running_var, training)


# ---------------------------------------------------------------------------
# KL terms
# ---------------------------------------------------------------------------


def kl_normal(mean, log_var, prior_mean=None, prior_log_var=None) -> Tensor:
    """KL between diagonal normals, summed over every element.

    With no prior given the prior is N(0, I):
    ``0.5 * sum(var + mean**2 - 1 - log_var)``.
    """
    mean, log_var = gc.as_tensor(mean), gc.as_tensor(log_var)
    if prior_mean is None:
        return (gc.exp(log_var) + gc.square(mean) - 1.0 - log_var).sum() * 0.5
    pm, plv = gc.as_tensor(prior_mean), gc.as_tensor(prior_log_var)
    inv_prior_var = gc.exp(-plv)
    ratio = gc.mul(gc.exp(log_var) + gc.square(mean - pm), inv_prior_var)
    return (plv - log_var + ratio - 1.0).sum() * 0.5


def kl_standard(posterior) -> float:
    """Closed-form KL of a (mean, log_var) posterior from N(0, I)."""
    mean, log_var = _params_of(posterior)
    return float(kl_normal(mean, log_var).data)


def kl_hierarchical(posteriors, priors, mode: str = "standard") -> list:
    """Per-level KL terms.

    ``standard`` compares every level with N(0, I); ``conditional`` compares
    level ``l`` with its predicted prior ``priors[l] = (mean, log_var)``.
    """
    posteriors = list(posteriors)
    if mode == "standard":
        return [kl_standard(p) for p in posteriors]
    if mode != "conditional":
        raise ValueError(f"unknown prior mode {mode!r}")
    priors = list(priors)
    if len(priors) != len(posteriors):
        raise ValueError(f"{len(posteriors)} posteriors but {len(priors)} priors")
    out = []
    for post, prior in zip(posteriors, priors):
        m, lv = _params_of(post)
        pm, plv = _params_of(prior)
        out.append(float(kl_normal(m, lv, pm, plv).data))
    return out


def _params_of(p):
    if isinstance(p, LatentLevel):
        return p.mean, p.log_var
    m, lv = p
    return m, lv


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class _Autoencoder:
    """Shared encoder/decoder plumbing; subclasses add the latent spaces."""

    def __init__(self, spec: ModelSpec, seed: int | None = 0):
        self.spec = spec
        self.training = False
        s = spec
        d1, d2 = s.depths[1], s.depths[2]
        C = s.n_channels
        self._layers = []
        add = self._add
        # encoder
        self.enc_te_conv = add(_Conv("enc.te.conv", 1, d1, s.temporal_kernel, pad="same-time"))
        self.enc_te_bn = add(_BatchNorm("enc.te.bn", d1))
        self.enc_sp_conv = add(_Conv("enc.sp.conv", d1, d2, (C, 1), groups=d1))
        self.enc_sp_bn = add(_BatchNorm("enc.sp.bn", d2))
        self.enc_sc_depthwise = add(
            _Conv("enc.sc.depthwise", d2, d2, s.separable_kernel, groups=d2, pad="same-time")
        )
        self.enc_sc_pointwise = add(_Conv("enc.sc.pointwise", d2, d2, (1, 1)))
        self.enc_sc_bn = add(_BatchNorm("enc.sc.bn", d2))
        self._build_latents()
        # decoder (mirrors the encoder)
        self.dec_sc_bn = add(_BatchNorm("dec.sc.bn", d2))
        self.dec_sc_pointwise = add(_Conv("dec.sc.pointwise", d2, d2, (1, 1), transposed=True))
        self.dec_sc_depthwise = add(
            _Conv("dec.sc.depthwise", d2, d2, s.separable_kernel, groups=d2, pad="same-time", transposed=True)
        )
        self.dec_sp_bn = add(_BatchNorm("dec.sp.bn", d2))
        self.dec_sp_conv = add(_Conv("dec.sp.conv", d2, d1, (C, 1), groups=d1, transposed=True))
        self.dec_te_bn = add(_BatchNorm("dec.te.bn", d1))
        self.dec_te_conv = add(
            _Conv("dec.te.conv", d1, 1, s.temporal_kernel, pad="same-time", transposed=True)
        )
        self._build_decoder_heads()
        if seed is not None:
            self.init_weights(np.random.default_rng(seed))

    def _add(self, layer):
        self._layers.append(layer)
        return layer

    def _build_latents(self):
        raise NotImplementedError

    def _build_decoder_heads(self):
        pass

    # -- parameter access -------------------------------------------------
    def named_parameters(self):
        for layer in self._layers:
            yield from layer.params()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for layer in self._layers:
            if isinstance(layer, _BatchNorm):
                yield from layer.buffers()

    def state(self) -> list:
        """Every named array (parameters, then batch-norm running stats)."""
        out = [(n, p.data) for n, p in self.named_parameters()]
        return out + list(self.named_buffers())

    def init_weights(self, rng: np.random.Generator):
        for layer in self._layers:
            layer.init(rng)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    # -- building blocks --------------------------------------------------
    def _drop(self, x, rng):
        return gc.dropout(x, self.spec.dropout, self.training, rng)

    def _input(self, x) -> Tensor:
        arr = np.asarray(getattr(x, "samples", x), dtype=np.float64)
        C, T = self.spec.n_channels, self.spec.n_samples
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.shape[1:] != (1, C, T):
            raise gc.ShapeError(f"expected segments of shape ({C}, {T}), got {arr.shape[-2:]}")
        return Tensor(arr)

    def _encode_blocks(self, x: Tensor, rng):
        tr = self.training
        s = self.spec
        e_te = self.enc_te_bn(self.enc_te_conv(x), tr)
        h = gc.elu(self.enc_sp_bn(self.enc_sp_conv(e_te), tr))
        if s.pools[0] != (1, 1):
            h = gc.avg_pool(h, s.pools[0])
        e_sp = self._drop(h, rng)
        h = self.enc_sc_pointwise(self.enc_sc_depthwise(e_sp))
        h = gc.elu(self.enc_sc_bn(h, tr))
        if s.pools[1] != (1, 1):
            h = gc.avg_pool(h, s.pools[1])
        e_sc = self._drop(h, rng)
        return {"te": e_te, "sp": e_sp, "sc": e_sc}

    def _decode_sc(self, h, rng):
        h = self._drop(h, rng)
        if self.spec.pools[1] != (1, 1):
            h = gc.upsample(h, self.spec.pools[1])
        h = self.dec_sc_bn(gc.elu(h), self.training)
        return self.dec_sc_depthwise(self.dec_sc_pointwise(h))

    def _decode_sp(self, h, rng):
        h = self._drop(h, rng)
        if self.spec.pools[0] != (1, 1):
            h = gc.upsample(h, self.spec.pools[0])
        h = self.dec_sp_bn(gc.elu(h), self.training)
        return self.dec_sp_conv(h)

    def _decode_te(self, h):
        return self.dec_te_conv(self.dec_te_bn(h, self.training))

    @staticmethod
    def _head(layer, feature, name) -> LatentLevel:
        mean, log_var = gc.depth_split(layer(feature))
        return LatentLevel(name, mean, log_var)

    @staticmethod
    def sample(level: LatentLevel, eps=None) -> Tensor:
        """Reparametrized draw; ``eps=None`` means zero noise (posterior mean)."""
        if eps is None:
            eps = np.zeros(level.mean.shape)
        level.eps = np.asarray(eps, dtype=np.float64)
        level.z = level.mean + gc.mul(gc.exp(level.log_var * 0.5), level.eps)
        return level.z

    @staticmethod
    def _eps(level: LatentLevel, rng, sampled: bool):
        return rng.standard_normal(level.mean.shape) if sampled else None

    # -- losses -----------------------------------------------------------
    def loss(self, x, result: ForwardResult):
        """Return ``(total_tensor, LossBreakdown)`` for a batch.

        Reconstruction is the mean over segments of the summed channel-wise
        soft-DTW; each KL term is summed over latent elements and averaged
        over segments.
        """
        s = self.spec
        target = self._input(x).data
        recon, per_segment = soft_dtw_loss(target, result.recon, s.gamma, s.cost)
        result.recon_per_segment = per_segment
        nseg = target.shape[0]
        kls = []
        for level, prior in zip(result.posterior.levels, result.priors):
            if prior is None:
                kl = kl_normal(level.mean, level.log_var)
            else:
                kl = kl_normal(level.mean, level.log_var, *prior)
            kls.append(kl * (1.0 / nseg))
        total = recon
        for kl in kls:
            total = total + kl * s.beta
        breakdown = LossBreakdown(
            float(recon.data), tuple(float(k.data) for k in kls), float(total.data)
        )
        return total, breakdown

    def reconstruct(self, x, eps_mode: str = "zero", seed: int | None = None, mode: str = "with_z3"):
        """Inference-mode reconstruction as a (B, C, T) array."""
        was = self.training
        self.eval()
        try:
            rng = np.random.default_rng(seed)
            res = self.forward(x, rng=rng, sampled=(eps_mode == "sampled"), mode=mode)
        finally:
            self.training = was
        return res.recon.data[:, 0]


class VEEGNet(_Autoencoder):
    """Single latent space ``z0`` after the separable block."""

    def _build_latents(self):
        d2 = self.spec.depths[2]
        self.sample_layer = self._add(_Conv("latent.z0.posterior", d2, 2 * d2, (1, 1), bias=True))

    def encode(self, x, rng=None):
        feats = self._encode_blocks(self._input(x), rng)
        return feats, LatentBundle([self._head(self.sample_layer, feats["sc"], "z0")])

    def decode(self, bundle: LatentBundle, mode: str = "from_z1", rng=None) -> Tensor:
        if mode != "from_z1":
            raise ValueError(f"decode mode {mode!r} needs the hv variant")
        z = bundle.levels[0].z
        return self._decode_te(self._decode_sp(self._decode_sc(z, rng), rng))

    def forward(self, x, rng=None, sampled: bool = False, mode: str = "from_z1") -> ForwardResult:
        if mode == "with_z3":
            mode = "from_z1"
        _, bundle = self.encode(x, rng)
        lv = bundle.levels[0]
        self.sample(lv, self._eps(lv, rng, sampled))
        return ForwardResult(self.decode(bundle, mode, rng), bundle, [None])


class HVEEGNet(_Autoencoder):
    """Three latent spaces injected additively into the decoder.

    Each level of depth ``d`` owns a posterior head (``d -> 2d`` pointwise
    convolution on the encoder feature) plus decoder-side machinery: a
    batch-norm of the decoder state, a prior head predicting a conditional
    prior from it and a context head that shifts the posterior by the same
    state. The decoder-side heads are only used with ``prior_mode="conditional"``.
    """

    LEVELS = ("z1", "z2", "z3")

    def _build_latents(self):
        d1, d2 = self.spec.depths[1], self.spec.depths[2]
        self.level_depth = {"z1": d2, "z2": d2, "z3": d1}
        self.posterior_heads = {
            name: self._add(_Conv(f"latent.{name}.posterior", d, 2 * d, (1, 1), bias=True))
            for name, d in self.level_depth.items()
        }

    def _build_decoder_heads(self):
        self.state_norms, self.prior_heads, self.context_heads = {}, {}, {}
        for name, d in self.level_depth.items():
            self.state_norms[name] = self._add(_BatchNorm(f"latent.{name}.state_bn", d))
            self.prior_heads[name] = self._add(_Conv(f"latent.{name}.prior", d, 2 * d, (1, 1), bias=True))
            self.context_heads[name] = self._add(
                _Conv(f"latent.{name}.context", d, 2 * d, (1, 1), bias=True)
            )

    def encode(self, x, rng=None):
        """Bottom-up posteriors for z1 (separable), z2 (spatial) and z3 (temporal)."""
        feats = self._encode_blocks(self._input(x), rng)
        where = {"z1": "sc", "z2": "sp", "z3": "te"}
        bundle = LatentBundle(
            [self._head(self.posterior_heads[n], feats[where[n]], n) for n in self.LEVELS]
        )
        return feats, bundle

    def _top_down(self, name, state, level: LatentLevel):
        """Conditional prior and posterior shift from the decoder state."""
        h = self.state_norms[name](state, self.training)
        prior = gc.depth_split(self.prior_heads[name](h))
        dm, dlv = gc.depth_split(self.context_heads[name](h))
        return prior, LatentLevel(name, level.mean + dm, level.log_var + dlv)

    def decode(self, bundle: LatentBundle, mode: str = "with_z3", rng=None) -> Tensor:
        if mode not in DECODE_MODES:
            raise ValueError(f"decode mode must be one of {DECODE_MODES}, got {mode!r}")
        h = self._decode_sc(bundle["z1"].z, rng)
        if mode != "from_z1":
            h = h + bundle["z2"].z
        h = self._decode_sp(h, rng)
        if mode == "with_z3":
            h = h + bundle["z3"].z
        return self._decode_te(h)

    def forward(self, x, rng=None, sampled: bool = False, mode: str = "with_z3") -> ForwardResult:
        if mode not in DECODE_MODES:
            raise ValueError(f"decode mode must be one of {DECODE_MODES}, got {mode!r}")
        conditional = self.spec.prior_mode == "conditional"
        _, bottom_up = self.encode(x, rng)
        levels, priors = [], []

        def resolve(name, state):
            level = bottom_up[name]
            prior = None
            if conditional:
                prior, level = self._top_down(name, state, level)
            self.sample(level, self._eps(level, rng, sampled))
            levels.append(level)
            priors.append(prior)
            return level.z

        z1 = resolve("z1", Tensor(np.zeros(bottom_up["z1"].mean.shape)))
        h = self._decode_sc(z1, rng)
        z2 = resolve("z2", h)
        if mode != "from_z1":
            h = h + z2
        h = self._decode_sp(h, rng)
        z3 = resolve("z3", h)
        if mode == "with_z3":
            h = h + z3
        return ForwardResult(self._decode_te(h), LatentBundle(levels), priors)


def build_model(spec: ModelSpec, seed: int | None = 0):
    cls = VEEGNet if spec.variant == "v3" else HVEEGNet
    return cls(spec, seed)


# ---------------------------------------------------------------------------
# parameter ledger
# ---------------------------------------------------------------------------


def param_count(spec: ModelSpec) -> dict:
    """Per-tensor ledger with encoder/latent/decoder subtotals.

    Keys: ``ledger`` (list of ``(name, shape, count)``), ``total``,
    ``encoder``, ``latent``, ``decoder``.
    """
    model = build_model(spec, seed=None)
    ledger = [(n, p.shape, int(p.data.size)) for n, p in model.named_parameters()]
    part = lambda prefix: sum(c for n, _, c in ledger if n.startswith(prefix))
    return {
        "ledger": ledger,
        "total": sum(c for _, _, c in ledger),
        "encoder": part("enc."),
        "latent": part("latent."),
        "decoder": part("dec."),
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model) -> bytes:
    spec_json = model.spec.to_json().encode()
    state = model.state()
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(spec_json)),
        spec_json,
        struct.pack("<I", len(state)),
    ]
    for name, arr in state:
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(
                f"truncated checkpoint: reading {what} needs {pos + n} bytes, file has {len(data)}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic at byte 0")
    version, nspec = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    try:
        spec = ModelSpec.from_dict(json.loads(take(nspec, "spec")))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"invalid model spec at byte 12: {exc}") from exc
    model = build_model(spec, seed=None)
    expected = dict(model.state())
    (count,) = struct.unpack("<I", take(4, "blob count"))
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} arrays, model needs {len(expected)}")
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        if name not in expected or expected[name].shape != shape:
            raise CheckpointError(f"unexpected array {name!r} with shape {shape} at byte {pos}")
        n = int(np.prod(shape)) if shape else 1
        expected[name][...] = np.frombuffer(take(8 * n, name), dtype="<f8").reshape(shape)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after byte {pos}")
    return model


def with_prior_mode(spec: ModelSpec, mode: str) -> ModelSpec:
    return replace(spec, prior_mode=mode)
