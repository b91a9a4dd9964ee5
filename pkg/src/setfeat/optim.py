"""Parameter update rules: SGD with (Nesterov) momentum and Adam.

Optimizers never touch gradients; callers zero them between steps.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with optional momentum, Nesterov lookahead, and L2 weight decay."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        momentum: float = 0.0,
        nesterov: bool = False,
        weight_decay: float = 0.0,
    ):
        if nesterov and momentum == 0.0:
            raise ValueError("nesterov requires a nonzero momentum")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.step_count = 0
        self._bufs = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self._bufs):
            if p.grad is None:
                raise ValueError("optimizer step: a parameter has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf *= self.momentum
                buf += g
                d = g + self.momentum * buf if self.nesterov else buf
            else:
                d = g
            p.data -= (self.lr * d).astype(p.data.dtype, copy=False)
        self.step_count += 1


class Adam:
    """Adam with bias correction and classic L2 weight decay folded into g."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ValueError("optimizer step: a parameter has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)
