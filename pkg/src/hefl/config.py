"""Scenario configuration: dataclasses plus TOML/JSON loading.

See ``configs/`` for examples and README.md for the full schema.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .federated import FLConfig
from .neural import AvgPool, Conv2d, Dense, Flatten, ModelSpec, ReLU, Softmax


def preset_model(name: str, input_shape, num_classes: int) -> ModelSpec:
    """Desk-scale architectures: ``linear``, ``mlp``, ``mlp_wide``, ``cnn``."""
    input_shape = tuple(input_shape)
    flat = 1
    for d in input_shape:
        flat *= d
    head = (Flatten(),) if len(input_shape) > 1 else ()
    if name == "linear":
        layers = head + (Dense(flat, num_classes),)
    elif name == "mlp":
        layers = head + (Dense(flat, 32), ReLU(), Dense(32, num_classes))
    elif name == "mlp_wide":
        layers = head + (Dense(flat, 64), ReLU(), Dense(64, num_classes))
    elif name == "cnn":
        if len(input_shape) != 3:
            raise ConfigError("the cnn preset needs (C, H, W) inputs")
        c, hh, ww = input_shape
        oh, ow = hh - 2, ww - 2
        pool = 2 if oh % 2 == 0 and ow % 2 == 0 else 1
        layers = (Conv2d(c, 4, 3), ReLU())
        if pool > 1:
            layers += (AvgPool(pool),)
        layers += (Flatten(), Dense(4 * (oh // pool) * (ow // pool), num_classes))
    else:
        raise ConfigError(f"unknown model preset {name!r}")
    return ModelSpec(layers + (Softmax(),), input_shape)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class DataConfig:
    source: str = "digits"          # digits | blobs | csv | idx
    path: str | None = None
    labels_path: str | None = None
    n_samples: int = 600
    n_features: int = 2
    centers: int = 3
    cluster_std: float = 1.0
    max_samples: int | None = None
    test_fraction: float = 0.25
    validation_fraction: float = 0.2
    partition: str = "even"         # even | dirichlet
    dirichlet_alpha: float = 0.5

    def __post_init__(self):
        if self.source not in ("digits", "blobs", "csv", "idx"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.partition not in ("even", "dirichlet"):
            raise ValueError(f"unknown partition {self.partition!r}")
        if not 0 < self.test_fraction < 1 or not 0 < self.validation_fraction < 1:
            raise ValueError("test_fraction and validation_fraction must be in (0, 1)")


@dataclass
class HospitalConfig:
    name: str
    model: object = "mlp"           # preset name or {"input_shape": [...], "layers": [...]}
    edges: int = 2
    fl: FLConfig = field(default_factory=FLConfig)

    def __post_init__(self):
        if self.edges < 1:
            raise ValueError(f"{self.name}: edges must be >= 1")
        if self.fl.participants_per_round > self.edges:
            raise ValueError(f"{self.name}: participants_per_round exceeds edge count")

    def model_spec(self, input_shape, num_classes) -> ModelSpec:
        if isinstance(self.model, str):
            return preset_model(self.model, input_shape, num_classes)
        return ModelSpec.from_dict(self.model)


@dataclass
class LedgerConfig:
    hospital_nodes: int = 3
    bm_nodes: int = 5
    hash_only: bool = False

    def __post_init__(self):
        if self.hospital_nodes < 1 or self.bm_nodes < 1:
            raise ValueError("ledger node counts must be >= 1")


@dataclass
class BenchConfig:
    node_counts: list = field(default_factory=lambda: [5, 10, 15, 20])
    image_counts: list = field(default_factory=lambda: [50, 100, 150, 200, 250, 300])
    repeats: int = 3


@dataclass
class ScenarioConfig:
    scenario_id: str = "scenario"
    seed: int = 0
    hospitals: list = field(default_factory=list)
    data: DataConfig = field(default_factory=DataConfig)
    ledger: LedgerConfig = field(default_factory=LedgerConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    grid_step: float = 0.1
    frac_bits: int = 16
    eval_subsample: int | None = None
    mpc_batch: int = 128

    def __post_init__(self):
        if len(self.hospitals) < 2:
            raise ValueError("cross-hospital evaluation needs at least 2 hospitals")
        names = [h.name for h in self.hospitals]
        if len(set(names)) != len(names):
            raise ValueError("hospital names must be unique")
        if any("/" in n or n.startswith(("BM", "dealer")) for n in names):
            raise ValueError("hospital names may not contain '/' or start with BM/dealer")
        if self.eval_subsample is not None and self.eval_subsample < 1:
            raise ValueError("eval_subsample must be >= 1 when set")
        if self.mpc_batch < 1:
            raise ValueError("mpc_batch must be >= 1")

    @property
    def h(self) -> int:
        return len(self.hospitals)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        hospitals = []
        for i, hd in enumerate(d.pop("hospitals", [])):
            hd = dict(hd)
            hd.setdefault("name", f"H{i}")
            fl = _build(FLConfig, hd.pop("fl", {}), f"hospitals[{i}].fl")
            hospitals.append(_build(HospitalConfig, {**hd, "fl": fl}, f"hospitals[{i}]"))
        sub = {
            "data": _build(DataConfig, d.pop("data", {}), "data"),
            "ledger": _build(LedgerConfig, d.pop("ledger", {}), "ledger"),
            "bench": _build(BenchConfig, d.pop("bench", {}), "bench"),
        }
        return _build(cls, {**d, **sub, "hospitals": hospitals}, "scenario")

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            raw = tomllib.loads(text)
    except ValueError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    cfg = ScenarioConfig.from_dict(raw)
    base = path.parent
    for attr in ("path", "labels_path"):
        p = getattr(cfg.data, attr)
        if p is not None and not Path(p).is_absolute():
            setattr(cfg.data, attr, str((base / p).resolve()))
    for attr in ("path", "labels_path"):
        p = getattr(cfg.data, attr)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"data file not found: {p}")
    return cfg
