"""Experiment configuration: file parsing, defaults, and cross-field validation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import PartitionSpec
from .federation import STRATEGIES, FedConfig
from .losses import DistillConfig, ProxConfig
from .nn import ACTIVATIONS, MlpSpec, SgdHyper
from . import seeding


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


TOY_DEFAULT_WIDTHS = [2, 32, 32, 4]

DEFAULTS: dict = {
    "strategy": "fedavg",
    "seed": 0,
    "output_dir": "runs/out",
    "diagnostics": False,
    "probe_c": 0.0,
    "workers": 1,
    "dataset": {
        "kind": "toy",
        "n_train": 600,
        "n_test": 400,
        "path": None,
        "test_path": None,
        "num_classes": None,  # toy -> 4; csv -> required
    },
    "model": {
        "layer_widths": None,  # toy -> TOY_DEFAULT_WIDTHS; csv -> required
        "activation": "relu",
    },
    "partition": {
        "alpha": 0.1,
        "num_clients": 20,
        "val_fraction": 0.1,
    },
    "federation": {
        "rounds": 100,
        "local_epochs": 20,
        "batch_size": 64,
        "participation": 0.2,
        "buffer_size": 5,
    },
    "distill": {
        "gamma": 0.2,
        "temperature": 1.0,
        "regularizer": "kl",
    },
    "prox": {
        "mu": 0.01,
    },
    "sgd": {
        "learning_rate": 0.05,
        "momentum": 0.9,
        "weight_decay": 1e-5,
    },
    "vote": {
        "lambda": 0.1,
        "beta": None,  # None -> 1 / buffer_size
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    n_train: int = 600
    n_test: int = 400
    path: str | None = None
    test_path: str | None = None
    num_classes: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    fed: FedConfig
    partition: PartitionSpec
    model: MlpSpec
    dataset: DatasetConfig
    output_dir: str
    diagnostics: bool = False
    probe_c: float = 0.0
    workers: int = 1

    def resolved_dict(self) -> dict:
        """Fully resolved config for the provenance dump next to the metrics."""
        return {
            "strategy": self.fed.strategy,
            "seed": self.fed.master_seed,
            "output_dir": self.output_dir,
            "diagnostics": self.diagnostics,
            "probe_c": self.probe_c,
            "workers": self.workers,
            "dataset": {
                "kind": self.dataset.kind,
                "n_train": self.dataset.n_train,
                "n_test": self.dataset.n_test,
                "path": self.dataset.path,
                "test_path": self.dataset.test_path,
                "num_classes": self.dataset.num_classes,
            },
            "model": {
                "layer_widths": list(self.model.layer_widths),
                "activation": self.model.activation,
            },
            "partition": {
                "alpha": self.partition.alpha,
                "num_clients": self.partition.num_clients,
                "val_fraction": self.partition.val_fraction,
                "seed": self.partition.seed,
            },
            "federation": {
                "rounds": self.fed.rounds,
                "local_epochs": self.fed.local_epochs,
                "batch_size": self.fed.batch_size,
                "participation": self.fed.participation,
                "buffer_size": self.fed.buffer_size,
            },
            "distill": {
                "gamma": self.fed.distill.gamma,
                "temperature": self.fed.distill.temperature,
                "regularizer": self.fed.distill.regularizer_kind,
            },
            "prox": {"mu": self.fed.prox.mu},
            "sgd": {
                "learning_rate": self.fed.sgd.learning_rate,
                "momentum": self.fed.sgd.momentum,
                "weight_decay": self.fed.sgd.weight_decay,
            },
            "vote": {"lambda": self.fed.vote_lambda, "beta": self.fed.vote_beta},
        }


def _merge_with_defaults(user: dict, defaults: dict, path: str = "") -> dict:
    merged = {}
    for key, default in defaults.items():
        full = f"{path}.{key}" if path else key
        if key in user:
            value = user[key]
            if isinstance(default, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"{full}: expected a mapping, got {type(value).__name__}")
                merged[key] = _merge_with_defaults(value, default, full)
            else:
                merged[key] = value
        else:
            merged[key] = dict(default) if isinstance(default, dict) else default
    for key in user:
        if key not in defaults:
            full = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {full}")
    return merged


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        raw = json.loads(text)
    else:
        raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    return raw


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Load, default-fill, and validate an experiment config file.

    `overrides` maps top-level keys (e.g. seed, diagnostics, workers,
    output_dir) to values that win over the file.
    """
    raw = load_config_file(path)
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(raw)


def build_config(raw: dict) -> ExperimentConfig:
    cfg = _merge_with_defaults(raw, DEFAULTS)

    strategy = cfg["strategy"]
    _require(strategy in STRATEGIES, f"strategy: must be one of {STRATEGIES}, got {strategy!r}")

    seed = cfg["seed"]
    _require(isinstance(seed, int) and seed >= 0, f"seed: must be a nonnegative integer, got {seed!r}")

    ds = cfg["dataset"]
    _require(ds["kind"] in ("toy", "csv"), f"dataset.kind: must be 'toy' or 'csv', got {ds['kind']!r}")
    if ds["kind"] == "toy":
        num_classes = 4 if ds["num_classes"] is None else ds["num_classes"]
        _require(num_classes == 4, f"dataset.num_classes: toy dataset has 4 classes, got {num_classes}")
        _require(int(ds["n_train"]) >= 4, f"dataset.n_train: toy dataset needs >= 4 examples, got {ds['n_train']}")
        _require(int(ds["n_test"]) >= 1, f"dataset.n_test: must be >= 1, got {ds['n_test']}")
    else:
        _require(ds["path"] is not None, "dataset.path: required for kind 'csv'")
        _require(ds["test_path"] is not None, "dataset.test_path: required for kind 'csv'")
        _require(
            isinstance(ds["num_classes"], int) and ds["num_classes"] >= 2,
            f"dataset.num_classes: required (>= 2) for kind 'csv', got {ds['num_classes']!r}",
        )
        num_classes = ds["num_classes"]
    dataset = DatasetConfig(
        kind=ds["kind"],
        n_train=int(ds["n_train"]),
        n_test=int(ds["n_test"]),
        path=ds["path"],
        test_path=ds["test_path"],
        num_classes=int(num_classes),
    )

    model = cfg["model"]
    widths = model["layer_widths"]
    if widths is None:
        _require(dataset.kind == "toy", "model.layer_widths: required for csv datasets")
        widths = list(TOY_DEFAULT_WIDTHS)
    _require(
        isinstance(widths, (list, tuple)) and len(widths) >= 2 and all(isinstance(w, int) and w >= 1 for w in widths),
        f"model.layer_widths: need a list of >= 2 positive integers, got {widths!r}",
    )
    _require(
        widths[-1] == dataset.num_classes,
        f"model.layer_widths: output width {widths[-1]} != num_classes {dataset.num_classes}",
    )
    if dataset.kind == "toy":
        _require(widths[0] == 2, f"model.layer_widths: toy dataset has 2 input features, got input width {widths[0]}")
    _require(
        model["activation"] in ACTIVATIONS,
        f"model.activation: must be one of {ACTIVATIONS}, got {model['activation']!r}",
    )
    try:
        mlp = MlpSpec(layer_widths=tuple(widths), activation=model["activation"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None

    part = cfg["partition"]
    fed_section = cfg["federation"]
    _require(
        isinstance(part["num_clients"], int) and part["num_clients"] >= 1,
        f"partition.num_clients: must be a positive integer, got {part['num_clients']!r}",
    )
    participation = float(fed_section["participation"])
    _require(
        0 < participation <= 1,
        f"federation.participation: must be in (0, 1], got {participation}",
    )
    _require(
        participation * part["num_clients"] >= 1,
        f"federation.participation: participation * num_clients = {participation * part['num_clients']:.3g} < 1; "
        "no client would be sampled",
    )
    _require(
        int(fed_section["buffer_size"]) >= 1,
        f"federation.buffer_size: must be >= 1, got {fed_section['buffer_size']}",
    )
    if strategy == "fedgkd_vote":
        _require(
            float(part["val_fraction"]) > 0,
            "partition.val_fraction: fedgkd_vote scores teachers on client validation splits; must be > 0",
        )

    try:
        partition = PartitionSpec(
            alpha=float(part["alpha"]),
            num_clients=int(part["num_clients"]),
            seed=seeding.derive_seed(seed, seeding.PARTITION),
            val_fraction=float(part["val_fraction"]),
        )
    except ValueError as exc:
        raise ConfigError(f"partition: {exc}") from None

    try:
        distill = DistillConfig(
            gamma=float(cfg["distill"]["gamma"]),
            temperature=float(cfg["distill"]["temperature"]),
            regularizer_kind=cfg["distill"]["regularizer"],
        )
    except ValueError as exc:
        raise ConfigError(f"distill: {exc}") from None

    try:
        prox = ProxConfig(mu=float(cfg["prox"]["mu"]))
    except ValueError as exc:
        raise ConfigError(f"prox: {exc}") from None

    try:
        sgd = SgdHyper(
            learning_rate=float(cfg["sgd"]["learning_rate"]),
            momentum=float(cfg["sgd"]["momentum"]),
            weight_decay=float(cfg["sgd"]["weight_decay"]),
        )
    except ValueError as exc:
        raise ConfigError(f"sgd: {exc}") from None

    vote_beta = cfg["vote"]["beta"]
    try:
        fed = FedConfig(
            num_clients=int(part["num_clients"]),
            strategy=strategy,
            rounds=int(fed_section["rounds"]),
            local_epochs=int(fed_section["local_epochs"]),
            batch_size=int(fed_section["batch_size"]),
            participation=participation,
            buffer_size=int(fed_section["buffer_size"]),
            distill=distill,
            prox=prox,
            sgd=sgd,
            vote_lambda=float(cfg["vote"]["lambda"]),
            vote_beta=None if vote_beta is None else float(vote_beta),
            master_seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"federation: {exc}") from None

    workers = cfg["workers"]
    _require(isinstance(workers, int) and workers >= 1, f"workers: must be a positive integer, got {workers!r}")

    return ExperimentConfig(
        fed=fed,
        partition=partition,
        model=mlp,
        dataset=dataset,
        output_dir=str(cfg["output_dir"]),
        diagnostics=bool(cfg["diagnostics"]),
        probe_c=float(cfg["probe_c"]),
        workers=workers,
    )
