"""Adam optimizer and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor
from .errors import NumericError, ParameterError


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Pure cosine decay: base_lr at step 0, zero at ``total_steps``."""
    if total_steps <= 0:
        raise ParameterError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Standard Adam with bias correction; weight decay is deliberately zero."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        """One update over all parameters, reading each parameter's ``.grad``.

        Parameters with no recorded gradient are skipped (treated as zero
        gradient, i.e. left unchanged).
        """
        lr = self.base_lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"NaN/Inf gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
