import numpy as np


def numerical_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function ``f`` at ``x``."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def op_gradient_error(build, arrays, rng, h: float = 1e-5) -> float:
    """Worst relative error between autodiff and finite differences.

    ``build(*tensors)`` returns an output Tensor; the scalar checked is its
    inner product with a fixed random projection.
    """
    from hvts.gradcore import Tensor

    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    proj = None

    def scalar():
        nonlocal proj
        out = build(*[Tensor(a) for a in arrays]).data
        if proj is None:
            proj = rng.standard_normal(out.shape)
        return float((out * proj).sum())

    scalar()
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    (out * proj).sum().backward()
    worst = 0.0
    for leaf, a in zip(leaves, arrays):
        num = numerical_grad(scalar, a, h)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(a)
        worst = max(worst, max_rel_err(ana, num))
    return worst
