"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .transformer import ShapeMismatch, StudentModel


class AdamW:
    """Optimizer state lives here, never inside the model parameters."""

    def __init__(self, model: StudentModel, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.model = model
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in model.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in model.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, param in self.model.params.items():
            grad = grads.get(name)
            if grad is None:
                grad = np.zeros_like(param.data)
            if grad.shape != param.data.shape:
                raise ShapeMismatch(f"{name}: gradient {grad.shape} vs parameter {param.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            param.data -= self.lr * (update + self.weight_decay * param.data)
