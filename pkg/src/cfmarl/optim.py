"""Parameter containers and update rules shared by the network modules."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class ParamSet(dict):
    """Named parameter dictionary (str -> Tensor with requires_grad)."""

    def tensors(self) -> list:
        return list(self.values())

    def copy_values(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            out[k] = Tensor(v.value.copy(), requires_grad=True)
        return out

    def load_values(self, other: "ParamSet"):
        for k in self:
            self[k].value = other[k].value.copy()

    def vector(self) -> np.ndarray:
        return np.concatenate([v.value.ravel() for v in self.values()])


def global_norm(grads: list) -> float:
    return float(np.sqrt(sum(float((g**2).sum()) for g in grads)))


def clip_by_global_norm(grads: list, max_norm: float) -> tuple[list, float]:
    """Scale the gradient list so its global norm is at most max_norm."""
    norm = global_norm(grads)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def polyak_update(target: ParamSet, online: ParamSet, rate: float):
    """target <- (1 - rate) * target + rate * online."""
    for k in target:
        target[k].value *= 1.0 - rate
        target[k].value += rate * online[k].value


class Adam:
    """Adaptive moment estimation over a ParamSet."""

    def __init__(self, params: ParamSet, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}

    def step(self, grads: dict):
        """Apply one descent step using gradients keyed like the ParamSet."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g**2
            m_hat = self.m[k] / corr1
            v_hat = self.v[k] / corr2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
