"""Run configuration: one JSON document covering data, split, model, training,
probes, diagnostics and output paths.

Unknown keys are errors. Section-level seeds are not accepted; every stream
is derived from the top-level ``seed`` by name.
"""
from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict, fields

import numpy as np

from .data import AugmentConfig, SplitSpec, ToyConfig
from .model import ModelConfig
from .prototypes import ClusterConfig
from .train import LossToggles, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def substream_seed(seed, name):
    """Integer seed for a named stream; stable across runs and platforms."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def _dc_defaults(cls, drop=("seed",)):
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in drop}


def default_config() -> dict:
    train = _dc_defaults(TrainConfig, drop=("seed", "cluster", "loss_toggles", "augment"))
    train["cluster"] = _dc_defaults(ClusterConfig)
    train["loss_toggles"] = asdict(LossToggles())
    train["augment"] = _dc_defaults(AugmentConfig, drop=())
    train["augment"]["scale_jitter"] = list(train["augment"]["scale_jitter"])
    return {
        "version": CONFIG_VERSION,
        "seed": 0,
        "data": _dc_defaults(ToyConfig),
        # target_domains null means the last domain
        "split": {"target_domains": None, "label_fractions": [0.01, 0.05, 0.10], "validation_fraction": 0.0},
        "model": _dc_defaults(ModelConfig),
        "train": train,
        "probe": {"kind": "both", "k": 20, "temperature": 0.07, "lr": 0.1, "iters": 500,
                  "layer": "projection", "sanity": False},
        "diagnose": {"n": 10, "n_batches": 10, "batch_size": 64, "epsilon": None, "layer": "projection"},
        "output": {"dataset": "dataset.csv", "metrics": "metrics.jsonl", "checkpoint": "checkpoint.json",
                   "config": "config.json", "report": "report.json", "diagnostics": "diagnostics.json",
                   "embeddings": "embeddings.csv", "prototype_dumps": False},
    }


def _merge(base, user, path):
    for key, val in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], val, where)
        else:
            base[key] = val


def resolve(user: dict | None = None, seed=None) -> dict:
    """Applies ``user`` over the defaults, applies a seed override and validates."""
    cfg = default_config()
    user = copy.deepcopy(user or {})
    version = user.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (key 'version'), expected {CONFIG_VERSION}")
    _merge(cfg, user, "")
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def load(path, seed=None) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    return resolve(user, seed)


def _wrap(section, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def toy_config(cfg) -> ToyConfig:
    return ToyConfig(**cfg["data"], seed=substream_seed(cfg["seed"], "data"))


def model_config(cfg) -> ModelConfig:
    return ModelConfig(**cfg["model"], seed=substream_seed(cfg["seed"], "init"))


def train_config(cfg) -> TrainConfig:
    t = copy.deepcopy(cfg["train"])
    t["cluster"] = ClusterConfig(**t["cluster"], seed=substream_seed(cfg["seed"], "cluster"))
    t["loss_toggles"] = LossToggles(**t["loss_toggles"])
    aug = t["augment"]
    aug["scale_jitter"] = tuple(aug["scale_jitter"])
    t["augment"] = AugmentConfig(**aug)
    return TrainConfig(**t, seed=substream_seed(cfg["seed"], "train"))


def target_domains(cfg, n_domains):
    t = cfg["split"]["target_domains"]
    return frozenset([n_domains - 1]) if t is None else frozenset(int(g) for g in t)


def split_spec(cfg, n_domains, label_fraction) -> SplitSpec:
    return SplitSpec(target_domains(cfg, n_domains), float(label_fraction),
                     float(cfg["split"]["validation_fraction"]), seed=substream_seed(cfg["seed"], "split"))


def validate(cfg):
    """Re-runs every component's own validation; messages name the section."""
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("'seed' must be an integer")
    _wrap("data", lambda: toy_config(cfg).validate())
    _wrap("model", lambda: model_config(cfg).validate())
    _wrap("train", lambda: train_config(cfg).validate())
    if cfg["model"]["encoder_layers"][0] != cfg["data"]["ambient_dim"]:
        raise ConfigError("model.encoder_layers[0] must equal data.ambient_dim")
    sp = cfg["split"]
    fracs = sp["label_fractions"]
    if not isinstance(fracs, list) or not fracs or any(not 0 < float(f) <= 1 for f in fracs):
        raise ConfigError("split.label_fractions must be a nonempty list of values in (0, 1]")
    if not 0 <= float(sp["validation_fraction"]) < 1:
        raise ConfigError("split.validation_fraction must be in [0, 1)")
    targets = target_domains(cfg, cfg["data"]["n_domains"])
    if any(g < 0 for g in targets):
        raise ConfigError("split.target_domains must be non-negative")
    pr = cfg["probe"]
    if pr["kind"] not in ("knn", "linear", "both"):
        raise ConfigError("probe.kind must be one of knn, linear, both")
    if int(pr["k"]) < 1 or not float(pr["temperature"]) > 0:
        raise ConfigError("probe.k must be >= 1 and probe.temperature > 0")
    if int(pr["iters"]) < 0 or not float(pr["lr"]) > 0:
        raise ConfigError("probe.iters must be >= 0 and probe.lr > 0")
    for sec in ("probe", "diagnose"):
        if cfg[sec]["layer"] not in ("projection", "encoder"):
            raise ConfigError(f"{sec}.layer must be 'projection' or 'encoder'")
    dg = cfg["diagnose"]
    if int(dg["n"]) < 1 or int(dg["n_batches"]) < 0:
        raise ConfigError("diagnose.n must be >= 1 and diagnose.n_batches >= 0")
    if int(dg["batch_size"]) < 4 or int(dg["batch_size"]) % 2:
        raise ConfigError("diagnose.batch_size must be even and >= 4")
    if dg["epsilon"] is not None and not float(dg["epsilon"]) > 0:
        raise ConfigError("diagnose.epsilon must be positive or null")

