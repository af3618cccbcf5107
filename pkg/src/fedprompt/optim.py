"""SGD-with-momentum and AdamW over autodiff leaf tensors.

Both optimizers zero the parameter gradients at the end of ``step()`` so
that successive losses can accumulate gradients before a step.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import OptimizerStateError, ParameterError


class _Optimizer:
    kind = "base"

    def __init__(self, params: list[Tensor]):
        params = list(params)
        if not params:
            raise ParameterError("optimizer requires at least one parameter")
        self.params = params
        self.step_count = 0

    def _check_grads(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise OptimizerStateError(f"parameter {i} has no gradient buffer")

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        raise NotImplementedError


class SGDMomentum(_Optimizer):
    """Classic momentum: buf = m*buf + grad; theta -= lr*buf."""

    kind = "sgd-momentum"

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params)
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self._check_grads()
        self.step_count += 1
        for p, buf in zip(self.params, self._buf):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= self.lr * buf
        self.zero_grad()


class AdamW(_Optimizer):
    """Adam with decoupled weight decay applied directly to the parameters."""

    kind = "adamw"

    def __init__(
        self,
        params,
        lr: float = 5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        super().__init__(params)
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ParameterError(f"betas must lie in [0, 1), got {betas}")
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self._check_grads()
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        self.zero_grad()


def make_optimizer(kind: str, params, **hyper) -> _Optimizer:
    if kind == "sgd-momentum":
        return SGDMomentum(params, **hyper)
    if kind == "adamw":
        return AdamW(params, **hyper)
    raise ParameterError(f"unknown optimizer kind {kind!r}")
