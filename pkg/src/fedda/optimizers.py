"""Centralized optimizer steps (GD/SGD, SGDM, Adam, AdaGrad).

These are the reference recursions the federated rules reduce to. They are
also reused as FedOpt server optimizers and as FedLocal client optimizers.
Each ``step`` mutates the optimizer's own state and returns the new weights.
"""

from __future__ import annotations

import numpy as np


class Sgd:
    name = "sgd"

    def __init__(self, dim: int, lr: float):
        self.lr = lr
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def direction(self, g: np.ndarray) -> np.ndarray:
        """Advance the state with gradient ``g``; return the vector scaled by ``lr``."""
        self.t += 1
        return g

    def step(self, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        return w - self.lr * self.direction(g)


class Sgdm(Sgd):
    """``m <- beta m + (1 - beta) g``; ``W <- W - lr m``."""

    name = "sgdm"

    def __init__(self, dim: int, lr: float, beta: float = 0.9):
        super().__init__(dim, lr)
        self.beta = beta

    def direction(self, g):
        self.t += 1
        self.m = self.beta * self.m + (1.0 - self.beta) * g
        return self.m


class Adam(Sgd):
    """Adam with bias correction; the step counter starts at 1."""

    name = "adam"

    def __init__(self, dim: int, lr: float, beta1: float = 0.9, beta2: float = 0.99, eps: float = 0.1):
        super().__init__(dim, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def direction(self, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


class Adagrad(Sgd):
    """``V <- V + g^2``; ``W <- W - lr g / (sqrt(V) + eps)``."""

    name = "adagrad"

    def __init__(self, dim: int, lr: float, eps: float = 0.1):
        super().__init__(dim, lr)
        self.eps = eps

    def direction(self, g):
        self.t += 1
        self.v = self.v + g * g
        return g / (np.sqrt(self.v) + self.eps)


def make_optimizer(name: str, dim: int, lr: float, beta1=0.9, beta2=0.99, eps=0.1) -> Sgd:
    if name in ("gd", "sgd"):
        return Sgd(dim, lr)
    if name == "sgdm":
        return Sgdm(dim, lr, beta1)
    if name == "adam":
        return Adam(dim, lr, beta1, beta2, eps)
    if name == "adagrad":
        return Adagrad(dim, lr, eps)
    raise ValueError(f"unknown optimizer {name!r}")
