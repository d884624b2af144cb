"""Adam with decoupled weight decay.

The decay term lr*wd*p is applied directly to the parameter, outside the
moment update, so a zero gradient still shrinks the weights.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class PoisonedStepError(RuntimeError):
    """A gradient contained NaN/inf; parameters were left unchanged."""


class Adam:
    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """One update over all tracked parameters.

        Missing gradients count as zero (weight decay still applies).
        NaN/inf anywhere aborts before any parameter is touched.
        """
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise PoisonedStepError(
                    f"non-finite gradient at step {self.step_count + 1}"
                )
            grads.append(g)

        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.first_moment, self.second_moment):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps) \
                - self.lr * self.weight_decay * p.data
