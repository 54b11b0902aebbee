"""Experiment configuration: dataclasses with strict JSON loading.

Unknown keys are rejected and every error names the offending dotted key.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ALGORITHMS = (
    "fedda_sgdm",
    "fedda_adam",
    "fedda_adagrad",
    "fedda_prox",
    "fedavg",
    "naive_sgdm",
    "fedopt_sgdm",
    "fedopt_adam",
    "fedopt_adagrad",
    "fedlocal_sgdm",
    "fedlocal_adam",
)
DATA_KINDS = ("quadratic", "pinned_quadratic", "synthetic", "csv")
MODEL_KINDS = ("quadratic", "logistic", "mlp")


@dataclass
class StabilizationConfig:
    """End-of-training full-batch phase. ``start_round=None`` means the last
    ``fraction`` of rounds."""

    enabled: bool = False
    start_round: typing.Optional[int] = None
    fraction: float = 0.1
    local_steps: int = 1
    full_batch: bool = True
    full_participation: bool = True


@dataclass
class DataConfig:
    kind: str = "quadratic"
    clients: int = 2
    # quadratic
    dim: int = 2
    heterogeneity: float = 1.0
    samples_per_client: int = 10
    # synthetic classification
    n: int = 2000
    classes: int = 2
    separation: float = 4.0
    # partitioning (synthetic, csv)
    partition: str = "iid"
    alpha: float = 1.0
    min_fraction: float = 0.0
    test_fraction: float = 0.2
    # csv
    path: typing.Optional[str] = None
    target: typing.Union[int, str] = -1
    header: bool = False
    seed: typing.Optional[int] = None


@dataclass
class ModelConfig:
    kind: str = "quadratic"
    hidden: typing.List[int] = field(default_factory=list)
    init_scale: typing.Optional[float] = None


@dataclass
class FederationConfig:
    algorithm: str = "fedda_sgdm"
    rounds: int = 10
    clients_per_round: typing.Optional[int] = None
    local_steps: int = 5
    batch_size: typing.Optional[int] = None
    lr: float = 0.1
    server_lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 0.1
    mu: float = 0.0
    seed: int = 0
    workers: int = 1
    record_timing: bool = False
    stabilization: StabilizationConfig = field(default_factory=StabilizationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    # -- derived -----------------------------------------------------------
    @property
    def num_clients(self) -> int:
        return 2 if self.data.kind == "pinned_quadratic" else self.data.clients

    @property
    def participants(self) -> int:
        return self.num_clients if self.clients_per_round is None else self.clients_per_round

    @property
    def stabilization_start(self) -> int | None:
        s = self.stabilization
        if not s.enabled:
            return None
        if s.start_round is not None:
            return s.start_round
        return self.rounds - int(math.ceil(s.fraction * self.rounds))

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def validate(self) -> "FederationConfig":
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        need(self.algorithm in ALGORITHMS, "algorithm", f"must be one of {', '.join(ALGORITHMS)}")
        need(self.rounds >= 0, "rounds", "must be >= 0")
        need(self.local_steps >= 1, "local_steps", "must be >= 1")
        need(self.batch_size is None or self.batch_size >= 1, "batch_size", "must be >= 1 or null")
        need(self.lr > 0, "lr", "must be > 0")
        need(self.server_lr > 0, "server_lr", "must be > 0")
        need(0 <= self.beta1 < 1, "beta1", "must lie in [0, 1)")
        need(0 <= self.beta2 < 1, "beta2", "must lie in [0, 1)")
        need(self.eps > 0, "eps", "must be > 0")
        need(self.mu >= 0, "mu", "must be >= 0")
        need(self.mu == 0 or self.algorithm == "fedda_prox", "mu", "only fedda_prox uses a proximal term")
        need(self.seed >= 0, "seed", "must be >= 0")
        need(self.workers >= 1, "workers", "must be >= 1")
        d = self.data
        need(d.kind in DATA_KINDS, "data.kind", f"must be one of {', '.join(DATA_KINDS)}")
        need(d.clients >= 1, "data.clients", "must be >= 1")
        need(d.seed is None or d.seed >= 0, "data.seed", "must be >= 0")
        K = self.participants
        need(1 <= K <= self.num_clients, "clients_per_round", f"must lie in [1, {self.num_clients}]")
        m = self.model
        need(m.kind in MODEL_KINDS, "model.kind", f"must be one of {', '.join(MODEL_KINDS)}")
        quad_data = d.kind in ("quadratic", "pinned_quadratic")
        need(quad_data == (m.kind == "quadratic"), "model.kind",
             "quadratic models go with quadratic data and vice versa")
        if d.kind == "quadratic":
            need(d.dim >= 1, "data.dim", "must be >= 1")
            need(d.heterogeneity >= 0, "data.heterogeneity", "must be >= 0")
            need(d.samples_per_client >= 1, "data.samples_per_client", "must be >= 1")
        if d.kind in ("synthetic", "csv"):
            need(d.partition in ("iid", "dirichlet", "quantity"), "data.partition",
                 "must be iid, dirichlet or quantity")
            need(d.alpha > 0, "data.alpha", "must be > 0")
            need(0 <= d.test_fraction < 1, "data.test_fraction", "must lie in [0, 1)")
        if d.kind == "synthetic":
            need(d.n >= d.classes >= 2, "data.n", "need n >= classes >= 2")
            need(d.dim >= 1, "data.dim", "must be >= 1")
        if d.kind == "csv":
            need(bool(d.path), "data.path", "required for csv data")
        need(all(h >= 1 for h in m.hidden), "model.hidden", "layer widths must be >= 1")
        s = self.stabilization
        need(0 < s.fraction <= 1, "stabilization.fraction", "must lie in (0, 1]")
        need(s.start_round is None or s.start_round >= 0, "stabilization.start_round", "must be >= 0")
        need(s.local_steps >= 1, "stabilization.local_steps", "must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_type(value, tp, key):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        for option in typing.get_args(tp):
            try:
                return _check_type(value, option, key)
            except ConfigError:
                continue
        raise ConfigError(key, f"unexpected value {value!r}")
    if tp is type(None):
        if value is None:
            return None
        raise ConfigError(key, "expected null")
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigError(key, "expected a list")
        (inner,) = typing.get_args(tp)
        return [_check_type(v, inner, f"{key}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(key, "expected true/false")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(key, "expected an integer")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value):
            return float(value)
        raise ConfigError(key, "expected a finite number")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigError(key, "expected a string")
    raise ConfigError(key, f"unsupported field type {tp}")


def _build(cls, raw, prefix=""):
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(prefix + key, "unknown key")
    kwargs = {}
    for name, value in raw.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{prefix}{name}.")
        else:
            kwargs[name] = _check_type(value, tp, prefix + name)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> FederationConfig:
    return _build(FederationConfig, raw).validate()


def load_config(path) -> FederationConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from None
    return config_from_dict(raw)


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value`` to a raw config dict; ``value`` is parsed as JSON
    when possible, otherwise kept as a string."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "cannot override inside a non-object")
    node[parts[-1]] = value
    return raw
