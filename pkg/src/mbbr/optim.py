"""Adam with bias correction.

Weight decay defaults to the classic L2 form (``lambda * theta`` added to the
gradient); ``decoupled=True`` applies it directly to the parameters instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


@dataclass
class AdamState:
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decoupled: bool = False
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update of ``params`` (numpy arrays) from ``grads``."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("optimizer state was built for a different parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")

    state.step += 1
    b1, b2, lr, wd = state.beta1, state.beta2, state.learning_rate, state.weight_decay
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if wd and not state.decoupled:
            g = g + wd * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if wd and state.decoupled:
            p -= lr * wd * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


class Adam:
    """Optimizer over a fixed list of :class:`Tensor` parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-3, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, decoupled: bool = False):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, weight_decay=weight_decay, beta1=betas[0],
                               beta2=betas[1], epsilon=eps, decoupled=decoupled)

    def step(self) -> None:
        # Parameters that received no gradient this step get a zero gradient.
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
