"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, check_finite


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: OptimizerState,
               lr: float | None = None, check: bool = False) -> None:
    """Apply one AdamW update to ``params`` in place and advance ``state``.

    Moments are created lazily (zeros) on the first call. ``None`` gradients
    are treated as zeros so parameters still receive weight decay.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p *= p.dtype.type(1 - lr * state.weight_decay)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
        if check:
            check_finite(p, "optimizer step")


class AdamW:
    """Thin stateful wrapper binding :func:`adamw_step` to a list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, check_finite: bool = True):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)
        self.check_finite = check_finite

    def step(self, lr: float | None = None, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state, lr=lr, check=self.check_finite)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
