"""AdamW optimizer and the linear warmup/decay learning-rate schedule."""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from nap.errors import ConfigError, DivergenceError
from nap.tensor.core import Tensor


def lr_at(step: int, max_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``max_lr`` then linear decay to zero.

    Step is 0-indexed. During warmup the rate ramps as (step+1)/warmup so the
    very first update already moves; past ``total_steps`` the rate clamps at 0.
    """
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if warmup_steps >= total_steps:
        raise ConfigError(
            f"warmup_steps ({warmup_steps}) must be < total_steps ({total_steps})")
    if step < warmup_steps:
        return max_lr * (step + 1) / warmup_steps
    if step >= total_steps:
        return 0.0
    return max_lr * (total_steps - step) / (total_steps - warmup_steps)


class AdamW:
    """AdamW with decoupled weight decay.

    Update per parameter p with gradient g:
        m = b1*m + (1-b1)*g
        v = b2*v + (1-b2)*g^2
        mhat = m / (1 - b1^t);  vhat = v / (1 - b2^t)
        p -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p)

    Parameters must be named (Tensor.name); state is keyed by name so a
    checkpointed run can rebuild the optimizer against reloaded tensors.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        names = [p.name for p in params]
        if any(n is None for n in names):
            raise ConfigError("AdamW requires named parameters")
        if len(set(names)) != len(names):
            raise ConfigError("AdamW parameter names must be unique")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """Apply one update using accumulated .grad values.

        Raises DivergenceError (naming the parameter) if any updated value
        is no longer finite.
        """
        if lr is None:
            lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            with np.errstate(invalid="ignore", over="ignore"):  # caught below
                p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps)
                                + self.weight_decay * p.data)
            if not np.all(np.isfinite(p.data)):
                raise DivergenceError(
                    f"non-finite values in parameter '{p.name}' after update {self.t}",
                    param_name=p.name)
