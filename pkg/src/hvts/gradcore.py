"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations needed by the EEG autoencoders are provided. Feature maps
use the ``(batch, depth, height, width)`` layout, where height is the electrode
axis and width is time.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "op_node",
    "add",
    "mul",
    "exp",
    "square",
    "conv2d",
    "transpose_conv2d",
    "batch_norm",
    "elu",
    "avg_pool",
    "upsample",
    "dropout",
    "depth_split",
    "resolve_padding",
]


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class Tensor:
    """Array value plus the bookkeeping needed for a backward pass.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that need no gradient).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable | None = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        shape = self.shape
        return _node(self.data.sum(), (self,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")

    def mean(self) -> "Tensor":
        n = self.data.size
        shape = self.shape
        return _node(
            self.data.mean(), (self,), lambda g: (np.full(shape, float(g) / n),), "mean"
        )

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return _node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            out[idx] = g
            return (out,)

        return _node(self.data[idx], (self,), back, "getitem")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _node(data, parents, backward_fn, op) -> Tensor:
    """Create an op output; graph links are kept only if a parent needs grad."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), backward_fn if needs else None, op)


op_node = _node


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {sa} with {sb}") from exc
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _node(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul"
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def square(x: Tensor) -> Tensor:
    d = x.data
    return _node(d * d, (x,), lambda g: (2.0 * g * d,), "square")


def depth_split(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split a feature map into its first and second half along depth."""
    d = x.shape[1]
    if d % 2:
        raise ShapeError(f"depth_split needs an even depth, got {d}")
    h = d // 2
    return x[:, :h], x[:, h:]


# ---------------------------------------------------------------------------
# convolution kernels (stride 1, grouped)
# ---------------------------------------------------------------------------


def resolve_padding(pad, kernel: tuple[int, int]) -> tuple[int, int, int, int]:
    """Return ``(top, bottom, left, right)`` padding.

    ``"same"`` pads both spatial axes to preserve size (extra sample on the
    bottom/right for even kernels), ``"valid"`` pads nothing and
    ``"same-time"`` pads only the time axis.
    """
    kh, kw = kernel
    if pad == "valid":
        return (0, 0, 0, 0)
    if pad == "same":
        return ((kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2)
    if pad == "same-time":
        return (0, 0, (kw - 1) // 2, kw // 2)
    if isinstance(pad, tuple) and len(pad) == 4:
        return tuple(int(p) for p in pad)
    raise ValueError(f"unknown padding mode {pad!r}")


def _check_conv(x: np.ndarray, w: np.ndarray, groups: int, name: str, transposed: bool) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{name}: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    cin = x.shape[1]
    expect = w.shape[0] if transposed else w.shape[1] * groups
    if cin != expect or cin % groups or w.shape[0] % groups:
        raise ShapeError(
            f"{name}: kernel {w.shape} with groups={groups} expects input depth {expect}, got {cin}"
        )


_IM2COL_BUDGET = 1 << 23  # elements per unfolded chunk


def _unfold(xp: np.ndarray, groups: int, kh: int, kw: int) -> np.ndarray:
    """(b, groups, ho*wo, cin_g*kh*kw) patch matrix of a padded input."""
    b, cin = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    win = win.reshape(b, groups, cin // groups, ho, wo, kh, kw)
    return win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(b, groups, ho * wo, -1)


def _chunks(xp: np.ndarray, kh: int, kw: int):
    per_item = max(1, xp[0].size * kh * kw)
    step = max(1, _IM2COL_BUDGET // per_item)
    for start in range(0, xp.shape[0], step):
        yield slice(start, start + step)


def _corr(xp: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    """Grouped valid cross-correlation. ``w`` is (out, in/groups, kh, kw)."""
    b, cin, hp, wp = xp.shape
    cout, cin_g, kh, kw = w.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    cout_g = cout // groups
    wmat = w.reshape(groups, cout_g, cin_g * kh * kw).transpose(0, 2, 1)
    out = np.empty((b, groups, cout_g, ho * wo))
    for sl in _chunks(xp, kh, kw):
        cols = _unfold(xp[sl], groups, kh, kw)
        out[sl] = np.matmul(cols, wmat).transpose(0, 1, 3, 2)
    return out.reshape(b, cout, ho, wo)


def _corr_wgrad(xp: np.ndarray, g: np.ndarray, groups: int, kh: int, kw: int) -> np.ndarray:
    cout, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    cin_g, cout_g = xp.shape[1] // groups, cout // groups
    gw = np.zeros((groups, cout_g, cin_g * kh * kw))
    for sl in _chunks(xp, kh, kw):
        cols = _unfold(xp[sl], groups, kh, kw)
        gg = g[sl].reshape(-1, groups, cout_g, ho * wo)
        gw += np.matmul(gg, cols).sum(axis=0)
    return gw.reshape(cout, cin_g, kh, kw)


def _corr_xgrad(g: np.ndarray, w: np.ndarray, groups: int, hp: int, wp: int) -> np.ndarray:
    """Gradient of :func:`_corr` w.r.t. its padded input: a full correlation
    of ``g`` with the flipped, in/out-swapped kernel."""
    cout, cin_g, kh, kw = w.shape
    cout_g = cout // groups
    flipped = (
        w.reshape(groups, cout_g, cin_g, kh, kw)[..., ::-1, ::-1]
        .transpose(0, 2, 1, 3, 4)
        .reshape(groups * cin_g, cout_g, kh, kw)
    )
    gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    out = _corr(gp, np.ascontiguousarray(flipped), groups)
    assert out.shape[2:] == (hp, wp)
    return out


def _pad(x: np.ndarray, p: tuple[int, int, int, int]) -> np.ndarray:
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[1]), (p[2], p[3])))


def _crop(x: np.ndarray, p: tuple[int, int, int, int]) -> np.ndarray:
    h, w = x.shape[2], x.shape[3]
    return x[:, :, p[0] : h - p[1], p[2] : w - p[3]]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1, pad="valid") -> Tensor:
    """Grouped stride-1 convolution; ``weight`` has shape (out, in/groups, kh, kw)."""
    _check_conv(x.data, weight.data, groups, "conv2d", transposed=False)
    kh, kw = weight.shape[2:]
    p = resolve_padding(pad, (kh, kw))
    xp = _pad(x.data, p)
    out = _corr(xp, weight.data, groups)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
    hp, wp = xp.shape[2:]
    wdata = weight.data

    def back(g):
        gx = _crop(_corr_xgrad(g, wdata, groups, hp, wp), p) if x.requires_grad else None
        gw = _corr_wgrad(xp, g, groups, kh, kw) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(out, parents, back, "conv2d")


def transpose_conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1, pad="valid"
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` has shape (in, out/groups, kh, kw).

    With the same kernel and padding, this restores the spatial size that the
    matching forward convolution consumed.
    """
    _check_conv(x.data, weight.data, groups, "transpose_conv2d", transposed=True)
    kh, kw = weight.shape[2:]
    p = resolve_padding(pad, (kh, kw))
    hp = x.shape[2] + kh - 1
    wp = x.shape[3] + kw - 1
    if hp - p[0] - p[1] < 1 or wp - p[2] - p[3] < 1:
        raise ShapeError(f"transpose_conv2d: padding {p} too large for input {x.shape}")
    wdata = weight.data
    out = _crop(_corr_xgrad(x.data, wdata, groups, hp, wp), p)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
    xdata = x.data

    def back(g):
        gp = _pad(g, p)
        gx = _corr(gp, wdata, groups) if x.requires_grad else None
        gw = _corr_wgrad(gp, xdata, groups, kh, kw) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(np.ascontiguousarray(out), parents, back, "transpose_conv2d")


# ---------------------------------------------------------------------------
# normalization, activation, resampling
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-depth normalization over (batch, height, width).

    In training mode the running statistics are updated in place (unbiased
    variance, as the common framework default does).
    """
    d = x.shape[1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"batch_norm: scale/shift must have length {d}")
    axes = (0, 2, 3)
    if training:
        n = x.data.size // d
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    gamma = scale.data.reshape(1, -1, 1, 1)
    out = xhat * gamma + shift.data.reshape(1, -1, 1, 1)

    def back(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * gamma
        if training:
            m = x.data.size // d
            gx = (
                inv.reshape(1, -1, 1, 1)
                / m
                * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = gxhat * inv.reshape(1, -1, 1, 1)
        return gx, gscale, gshift

    return _node(out, (x, scale, shift), back, "batch_norm")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    d = x.data
    neg = alpha * np.expm1(np.minimum(d, 0.0))
    out = np.where(d > 0, d, neg)
    slope = np.where(d > 0, 1.0, neg + alpha)
    return _node(out, (x,), lambda g: (g * slope,), "elu")


def avg_pool(x: Tensor, window: tuple[int, int]) -> Tensor:
    """Non-overlapping average pooling; the window must tile the map exactly."""
    kh, kw = window
    b, c, h, w = x.shape
    if h % kh or w % kw:
        raise ShapeError(f"avg_pool: window {window} does not divide spatial dims {(h, w)}")
    out = x.data.reshape(b, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / (kh * kw),)

    return _node(out, (x,), back, "avg_pool")


def upsample(x: Tensor, factor: tuple[int, int]) -> Tensor:
    """Nearest-neighbour upsampling by integer factors."""
    fh, fw = factor
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

    def back(g):
        return (g.reshape(b, c, h, fh, w, fw).sum(axis=(3, 5)),)

    return _node(out, (x,), back, "upsample")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. The mask is drawn from ``rng`` and held constant for backward."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
