"""Differentiable loss oracles with analytic gradients.

Every model works on a flat float64 parameter vector so that optimizer state
(momentum, second moments) lives in the same shape as the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchEmpty, DimensionMismatch, InvalidArgument

FD_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class Batch:
    """A mini-batch: feature rows, targets and the source sample ids."""

    features: np.ndarray
    targets: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        n = len(self.indices)
        if n < 1:
            raise BatchEmpty("batch has no samples")
        if self.features.shape[0] != n or self.targets.shape[0] != n:
            raise DimensionMismatch(
                f"batch rows disagree: features {self.features.shape[0]}, "
                f"targets {self.targets.shape[0]}, indices {n}"
            )
        if len(np.unique(self.indices)) != n:
            raise InvalidArgument("batch indices must be unique")

    def __len__(self) -> int:
        return len(self.indices)


def as_params(values, dim: int | None = None) -> np.ndarray:
    """Coerce to a 1-D float64 parameter vector, checking length if given."""
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 1:
        raise DimensionMismatch(f"parameter vector must be 1-D, got shape {w.shape}")
    if dim is not None and w.shape[0] != dim:
        raise DimensionMismatch(f"expected {dim} parameters, got {w.shape[0]}")
    return w


class Model:
    """Base class: subclasses implement ``_loss_grad``."""

    kind = "abstract"
    dim: int

    def loss(self, params, batch: Batch) -> float:
        w = self._check(params, batch)
        return self._loss_grad(w, batch, need_grad=False)[0]

    def grad(self, params, batch: Batch) -> np.ndarray:
        w = self._check(params, batch)
        return self._loss_grad(w, batch, need_grad=True)[1]

    def loss_and_grad(self, params, batch: Batch) -> tuple[float, np.ndarray]:
        w = self._check(params, batch)
        return self._loss_grad(w, batch, need_grad=True)

    def init_params(self, rng: np.random.Generator | None = None, scale: float = 0.0) -> np.ndarray:
        if rng is None or scale == 0.0:
            return np.zeros(self.dim)
        return scale * rng.standard_normal(self.dim)

    def _check(self, params, batch: Batch) -> np.ndarray:
        if len(batch) < 1:
            raise BatchEmpty("batch has no samples")
        return as_params(params, self.dim)

    def _loss_grad(self, w: np.ndarray, batch: Batch, need_grad: bool):
        raise NotImplementedError


class Quadratic(Model):
    """``0.5 (W - c)^T A (W - c)``; the batch only has to be non-empty."""

    kind = "quadratic"

    def __init__(self, A, c):
        A = np.array(A, dtype=np.float64)
        c = as_params(c).copy()
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != c.shape[0]:
            raise DimensionMismatch(f"A has shape {A.shape}, c has length {c.shape[0]}")
        if not np.allclose(A, A.T, atol=1e-12, rtol=0.0):
            raise InvalidArgument("A must be symmetric")
        if np.linalg.eigvalsh(A).min() < -1e-12:
            raise InvalidArgument("A must be positive semidefinite")
        A.setflags(write=False)
        c.setflags(write=False)
        self.A = A
        self.c = c
        self.dim = c.shape[0]

    def _loss_grad(self, w, batch, need_grad):
        r = w - self.c
        Ar = self.A @ r
        return 0.5 * float(r @ Ar), (Ar if need_grad else None)

    def minimizer(self) -> np.ndarray:
        return self.c.copy()

    def __repr__(self):
        return f"Quadratic(dim={self.dim})"


def _labels(batch: Batch, n_classes: int) -> np.ndarray:
    y = np.asarray(batch.targets)
    yi = y.astype(np.int64)
    if not np.array_equal(yi, y) or yi.min() < 0 or yi.max() >= n_classes:
        raise DimensionMismatch(f"targets must be integer labels in [0, {n_classes})")
    return yi


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and d(loss)/d(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    picked = z[np.arange(n), y]
    loss = float(np.mean(np.log(s[:, 0]) - picked))
    probs = ez / s
    probs[np.arange(n), y] -= 1.0
    return loss, probs / n


class Logistic(Model):
    """Multinomial logistic regression, bias folded in as a constant feature.

    Parameters are a row-major ``(n_features + 1, n_classes)`` matrix; the last
    row holds the biases.
    """

    kind = "logistic"

    def __init__(self, n_features: int, n_classes: int):
        if n_features < 1 or n_classes < 2:
            raise InvalidArgument("need n_features >= 1 and n_classes >= 2")
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.dim = (self.n_features + 1) * self.n_classes

    def _augment(self, X):
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got shape {X.shape}")
        return np.hstack([X, np.ones((X.shape[0], 1))])

    def logits(self, params, X) -> np.ndarray:
        W = as_params(params, self.dim).reshape(self.n_features + 1, self.n_classes)
        return self._augment(np.asarray(X, dtype=np.float64)) @ W

    def predict(self, params, X) -> np.ndarray:
        return np.argmax(self.logits(params, X), axis=1)

    def _loss_grad(self, w, batch, need_grad):
        y = _labels(batch, self.n_classes)
        Xa = self._augment(batch.features)
        W = w.reshape(self.n_features + 1, self.n_classes)
        loss, dlogits = _softmax_xent(Xa @ W, y)
        if not need_grad:
            return loss, None
        return loss, (Xa.T @ dlogits).ravel()

    def __repr__(self):
        return f"Logistic(n_features={self.n_features}, n_classes={self.n_classes})"


class Mlp(Model):
    """Fully connected tanh network with a softmax cross-entropy head.

    ``sizes`` lists layer widths from input to output, e.g. ``(20, 16, 2)``.
    Each layer stores its ``(fan_in, fan_out)`` weight block followed by its
    bias, flattened in layer order.
    """

    kind = "mlp"

    def __init__(self, sizes):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1 or sizes[-1] < 2:
            raise InvalidArgument("sizes needs >= 2 positive entries and >= 2 outputs")
        self.sizes = sizes
        self.n_features = sizes[0]
        self.n_classes = sizes[-1]
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w_end = offset + fan_in * fan_out
            b_end = w_end + fan_out
            self._slices.append((offset, w_end, b_end, fan_in, fan_out))
            offset = b_end
        self.dim = offset

    def _unpack(self, w):
        return [
            (w[o:we].reshape(fi, fo), w[we:be])
            for o, we, be, fi, fo in self._slices
        ]

    def init_params(self, rng=None, scale: float = 1.0) -> np.ndarray:
        w = np.zeros(self.dim)
        if rng is None or scale == 0.0:
            return w
        for o, we, _, fi, fo in self._slices:
            w[o:we] = scale * rng.standard_normal(fi * fo) / np.sqrt(fi)
        return w

    def _forward(self, w, X):
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got shape {X.shape}")
        layers = self._unpack(w)
        acts = [X]
        a = X
        for k, (Wl, bl) in enumerate(layers):
            z = a @ Wl + bl
            a = z if k == len(layers) - 1 else np.tanh(z)
            acts.append(a)
        return layers, acts

    def predict(self, params, X) -> np.ndarray:
        _, acts = self._forward(as_params(params, self.dim), np.asarray(X, dtype=np.float64))
        return np.argmax(acts[-1], axis=1)

    def _loss_grad(self, w, batch, need_grad):
        y = _labels(batch, self.n_classes)
        layers, acts = self._forward(w, batch.features)
        loss, delta = _softmax_xent(acts[-1], y)
        if not need_grad:
            return loss, None
        g = np.empty(self.dim)
        for k in range(len(layers) - 1, -1, -1):
            o, we, be, fi, fo = self._slices[k]
            g[o:we] = (acts[k].T @ delta).ravel()
            g[we:be] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ layers[k][0].T) * (1.0 - acts[k] ** 2)
        return loss, g

    def __repr__(self):
        return f"Mlp(sizes={self.sizes})"


def loss(model: Model, params, batch: Batch) -> float:
    return model.loss(params, batch)


def grad(model: Model, params, batch: Batch) -> np.ndarray:
    return model.grad(params, batch)


def finite_diff_check(model: Model, params, batch: Batch, step: float = FD_STEP) -> float:
    """Max over coordinates of ``|analytic - fd| / (|fd| + 1e-12)``.

    ``fd`` is the central difference ``(L(w + h e_j) - L(w - h e_j)) / 2h``.
    """
    if not step > 0:
        raise InvalidArgument("finite-difference step must be positive")
    w = model._check(params, batch).copy()
    analytic = model.grad(w, batch)
    worst = 0.0
    for j in range(w.shape[0]):
        orig = w[j]
        w[j] = orig + step
        up = model.loss(w, batch)
        w[j] = orig - step
        down = model.loss(w, batch)
        w[j] = orig
        fd = (up - down) / (2.0 * step)
        worst = max(worst, abs(analytic[j] - fd) / (abs(fd) + 1e-12))
    return worst
