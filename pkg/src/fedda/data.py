"""Synthetic datasets, federated partitioning, CSV ingestion and batch sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BatchTooLarge,
    EmptyInput,
    InvalidArgument,
    ParseError,
    TooManyClients,
)
from .models import Batch, Quadratic


@dataclass(frozen=True, eq=False)
class Dataset:
    """Pooled samples before partitioning. Integer targets mean classification."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.targets.shape[0]:
            raise InvalidArgument(
                f"features {self.features.shape} and targets {self.targets.shape} disagree"
            )

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def n_classes(self) -> int | None:
        if not np.issubdtype(self.targets.dtype, np.integer):
            return None
        return int(self.targets.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.targets[idx])


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    features: np.ndarray
    targets: np.ndarray
    indices: np.ndarray  # global sample ids

    def __post_init__(self):
        if len(self.indices) < 1:
            raise InvalidArgument(f"client {self.client_id} has no samples")

    @property
    def n_samples(self) -> int:
        return len(self.indices)

    def batch(self, local_idx) -> Batch:
        local_idx = np.asarray(local_idx, dtype=np.int64)
        return Batch(self.features[local_idx], self.targets[local_idx], self.indices[local_idx])

    def full_batch(self) -> Batch:
        return Batch(self.features, self.targets, self.indices)


@dataclass(frozen=True, eq=False)
class Federation:
    clients: tuple[ClientDataset, ...]
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.clients) < 1:
            raise InvalidArgument("a federation needs at least one client")
        ids = [c.client_id for c in self.clients]
        if ids != list(range(len(ids))):
            raise InvalidArgument("client ids must be 0..M-1 in order")
        counts = np.array([c.n_samples for c in self.clients], dtype=np.float64)
        object.__setattr__(self, "weights", counts / counts.sum())

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def n_total(self) -> int:
        return int(sum(c.n_samples for c in self.clients))

    def __getitem__(self, i: int) -> ClientDataset:
        return self.clients[i]

    def __iter__(self):
        return iter(self.clients)

    def __len__(self) -> int:
        return len(self.clients)


def aggregation_weights(counts: Sequence[int]) -> np.ndarray:
    """``N_i / sum_j N_j`` over a participant set."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise InvalidArgument("sample counts must be positive")
    return counts / counts.sum()


def _random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _quadratic_clients(counts: Sequence[int], d: int) -> tuple[ClientDataset, ...]:
    clients = []
    start = 0
    for i, n_i in enumerate(counts):
        idx = np.arange(start, start + n_i)
        clients.append(ClientDataset(i, np.zeros((n_i, 0)), np.zeros(n_i), idx))
        start += n_i
    return tuple(clients)


def generate_quadratic_federation(
    M: int,
    d: int,
    heterogeneity: float,
    seed: int,
    samples_per_client: int | Sequence[int] = 10,
) -> tuple[Federation, list[Quadratic]]:
    """Heterogeneous quadratic clients ``0.5 (W - c_i)^T A_i (W - c_i)``.

    Each ``c_i`` lies on the sphere of radius ``heterogeneity`` around the
    origin and each ``A_i`` is SPD with eigenvalues drawn from ``[0.5, 2]``.
    ``heterogeneity=0`` gives identical clients: one shared ``A`` and ``c = 0``.
    Client samples carry no features; they only set the aggregation weights.
    """
    if M < 1 or d < 1 or not heterogeneity >= 0:
        raise InvalidArgument("need M >= 1, d >= 1, heterogeneity >= 0")
    counts = (
        [int(samples_per_client)] * M
        if np.isscalar(samples_per_client)
        else [int(n) for n in samples_per_client]
    )
    if len(counts) != M or min(counts) < 1:
        raise InvalidArgument("samples_per_client must give M positive counts")
    rng = np.random.default_rng(seed)

    def spd():
        Q = _random_rotation(rng, d)
        A = (Q * rng.uniform(0.5, 2.0, size=d)) @ Q.T
        return 0.5 * (A + A.T)

    shared = spd()
    models = []
    for _ in range(M):
        A = spd()
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        if heterogeneity == 0:
            models.append(Quadratic(shared, np.zeros(d)))
        else:
            models.append(Quadratic(A, heterogeneity * u))
    return Federation(_quadratic_clients(counts, d)), models


def pinned_quadratic_pair(samples_per_client: int = 10) -> tuple[Federation, list[Quadratic]]:
    """Two clients with ``A = I`` and minimizers ``(1, 0)`` and ``(-1, 0)``."""
    eye = np.eye(2)
    models = [Quadratic(eye, [1.0, 0.0]), Quadratic(eye, [-1.0, 0.0])]
    return Federation(_quadratic_clients([samples_per_client] * 2, 2)), models


def quadratic_global_minimizer(federation: Federation, models: Sequence[Quadratic]) -> np.ndarray:
    """Solve ``(sum w_i A_i) W = sum w_i A_i c_i``."""
    w = federation.weights
    H = sum(wi * m.A for wi, m in zip(w, models))
    b = sum(wi * (m.A @ m.c) for wi, m in zip(w, models))
    return np.linalg.solve(H, b)


def generate_synthetic_classification(
    n: int, d: int, classes: int, seed: int, separation: float = 4.0
) -> Dataset:
    """Gaussian clusters with unit covariance, pairwise mean distance ``separation``.

    Labels are balanced (``i % classes``) and then shuffled.
    """
    if not (n >= classes >= 2) or d < 1:
        raise InvalidArgument("need n >= classes >= 2 and d >= 1")
    rng = np.random.default_rng(seed)
    if classes <= d:
        directions = _random_rotation(rng, d)[:, :classes].T
    else:
        directions = rng.standard_normal((classes, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * (separation / np.sqrt(2.0))
    y = rng.permutation(np.arange(n) % classes).astype(np.int64)
    X = means[y] + rng.standard_normal((n, d))
    return Dataset(X, y)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    if not 0.0 <= test_fraction < 1.0:
        raise InvalidArgument("test_fraction must lie in [0, 1)")
    n_test = int(round(test_fraction * len(dataset)))
    if n_test == 0:
        return dataset, None
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


@dataclass(frozen=True)
class PartitionSpec:
    """``scheme`` is ``"iid"``, ``"dirichlet"`` (uses ``alpha``) or ``"quantity"``
    (uses ``min_fraction``)."""

    scheme: str = "iid"
    alpha: float = 1.0
    min_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet", "quantity"):
            raise InvalidArgument(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "dirichlet" and not self.alpha > 0:
            raise InvalidArgument("Dirichlet alpha must be positive")


def _repair_empty(groups: list[list[int]]) -> list[list[int]]:
    # every client needs N_i >= 1 for the sample-count weighting
    for g in groups:
        if not g:
            donor = max(range(len(groups)), key=lambda j: (len(groups[j]), -j))
            g.append(groups[donor].pop())
    return groups


def partition(dataset: Dataset, M: int, spec: PartitionSpec) -> Federation:
    """Split ``dataset`` among ``M`` clients; every sample lands in exactly one client."""
    n = len(dataset)
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    if M > n:
        raise TooManyClients(f"{M} clients but only {n} samples")
    rng = np.random.default_rng(spec.seed)

    if spec.scheme == "iid":
        perm = rng.permutation(n)
        groups = [list(chunk) for chunk in np.array_split(perm, M)]
    elif spec.scheme == "dirichlet":
        if dataset.n_classes is None:
            raise InvalidArgument("Dirichlet label skew needs integer class labels")
        groups = [[] for _ in range(M)]
        for c in range(dataset.n_classes):
            idx = rng.permutation(np.flatnonzero(dataset.targets == c))
            props = rng.dirichlet(np.full(M, spec.alpha))
            cuts = np.floor(np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for i, chunk in enumerate(np.split(idx, cuts)):
                groups[i].extend(chunk.tolist())
    else:
        if not 0 < spec.min_fraction <= 1.0 / M:
            raise InvalidArgument("min_fraction must lie in (0, 1/M]")
        base = int(np.floor(spec.min_fraction * n))
        extra = n - base * M
        props = rng.dirichlet(np.ones(M))
        sizes = base + np.floor(props * extra).astype(np.int64)
        sizes[: n - sizes.sum()] += 1
        perm = rng.permutation(n)
        groups = [list(chunk) for chunk in np.split(perm, np.cumsum(sizes)[:-1])]

    groups = _repair_empty(groups)
    clients = []
    for i, g in enumerate(groups):
        idx = np.sort(np.asarray(g, dtype=np.int64))
        clients.append(ClientDataset(i, dataset.features[idx], dataset.targets[idx], idx))
    return Federation(tuple(clients))


def sample_batch(client: ClientDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform draw without replacement inside the batch.

    ``batch_size == N_i`` returns the full batch in storage order and consumes
    nothing from ``rng``.
    """
    n = client.n_samples
    if batch_size < 1 or batch_size > n:
        raise BatchTooLarge(f"batch_size {batch_size} not in [1, {n}] for client {client.client_id}")
    if batch_size == n:
        return client.full_batch()
    return client.batch(rng.choice(n, size=batch_size, replace=False))


def load_csv(
    path,
    target_column: int | str = -1,
    feature_columns: Sequence[int | str] | None = None,
    header: bool = False,
) -> Dataset:
    """Read a comma-separated numeric table.

    Columns can be named only when ``header`` is true. Targets that are all
    integral become int64 class labels. Raises ``ParseError`` with 1-based
    line/column on non-numeric cells and ``EmptyInput`` when there are no
    data rows; missing files raise ``OSError``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    names: list[str] | None = None
    first_line = 1
    if header and rows:
        names = [s.strip() for s in rows[0]]
        rows = rows[1:]
        first_line = 2
    numbered = [(first_line + k, r) for k, r in enumerate(rows) if any(cell.strip() for cell in r)]
    if not numbered:
        raise EmptyInput()
    width = len(numbered[0][1])

    def resolve(col) -> int:
        if isinstance(col, str):
            if names is None or col not in names:
                raise ParseError(f"unknown column {col!r}")
            return names.index(col)
        j = col if col >= 0 else width + col
        if not 0 <= j < width:
            raise ParseError(f"column index {col} out of range for width {width}")
        return j

    t = resolve(target_column)
    feats = [resolve(c) for c in feature_columns] if feature_columns is not None else [
        j for j in range(width) if j != t
    ]
    values = np.empty((len(numbered), width))
    for r, (line, row) in enumerate(numbered):
        if len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", line=line)
        for j, cell in enumerate(row):
            try:
                values[r, j] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r}", line=line, column=j + 1) from None
    y = values[:, t]
    if np.all(np.isfinite(y)) and np.array_equal(y, np.round(y)):
        y = y.astype(np.int64)
    return Dataset(values[:, feats], y)
