"""Finite-difference gradient oracle and small fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from metamorph import functional as F
from metamorph import tensor as T
from metamorph.tensor import Tensor

FD_STEP = 1e-3
REL_TOL = 1e-4


def numeric_grad(f, arrays, index, h=FD_STEP):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(*arrays)
        x[i] = old - h
        down = f(*arrays)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(op, arrays, seed=0, differentiable=None):
    """Largest relative error between autodiff and finite differences.

    ``op`` maps Tensors to a Tensor; the output is contracted with a fixed
    random projection so every output element contributes.
    """
    differentiable = range(len(arrays)) if differentiable is None else differentiable
    with T.float64_mode():
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = op(*[Tensor(a) for a in arrays])
        proj = np.random.default_rng([seed, 7919]).normal(size=probe.shape)

        def scalar(*arrs):
            with T.no_grad():
                return float((op(*[Tensor(a) for a in arrs]).data * proj).sum())

        leaves = [Tensor(a, requires_grad=i in differentiable) for i, a in enumerate(arrays)]
        out = op(*leaves)
        T.tsum(T.mul(out, Tensor(proj))).backward()
        worst = 0.0
        for i in differentiable:
            fd = numeric_grad(scalar, arrays, i)
            worst = max(worst, relative_error(leaves[i].grad, fd))
    return worst


def away_from_zero(rng, shape, margin=0.05):
    """Values bounded away from a kink at zero (for ReLU-type checks)."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def tiny_conv_bn(rng, c_in=3, c_out=4):
    w = rng.normal(size=(c_out, c_in, 3, 3))
    b = rng.normal(size=c_out)
    scale = rng.uniform(0.5, 1.5, c_out)
    shift = rng.normal(size=c_out)
    mean = rng.normal(size=c_out)
    var = rng.uniform(0.2, 2.0, c_out)
    return w, b, scale, shift, mean, var


def conv_bn_reference(x, w, b, scale, shift, mean, var, eps=1e-5):
    with T.float64_mode(), T.no_grad():
        y = F.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1)
        y = F.batch_norm(y, Tensor(scale), Tensor(shift), mean.copy(), var.copy(), training=False, eps=eps)
    return y.data
