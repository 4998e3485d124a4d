"""Per-epoch training loop: re-cluster, then mini-batch descent on the summed objective."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AugmentConfig, MultiDomainDataset, augment_batch
from .losses import ContrastiveBatch, dcon, info_nce
from .model import (ModelConfig, ModelParams, OptimState, adam_step, backward, cosine_multiplier,
                    forward, init_model, init_optim)
from .prototypes import PCL_SCOPES, ClusterConfig, build_mix_batch, extract_prototypes, pcl_loss, pmix_loss

log = logging.getLogger(__name__)

# named RNG substreams, combined with the run seed and the epoch
_STREAM_BATCH = 11
_STREAM_CLUSTER = 12


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, epoch, params, opt, metrics):
        super().__init__(message)
        self.epoch = epoch
        self.params = params
        self.opt = opt
        self.metrics = metrics


@dataclass
class LossToggles:
    dcon: bool = True
    pmix: bool = True
    pcl: bool = True

    def any(self):
        return self.dcon or self.pmix or self.pcl


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 3e-4
    weight_decay: float = 1e-4
    tau: float = 0.07
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    mix_alpha: float = 4.0
    warmup_epochs: int | None = None
    loss_toggles: LossToggles = field(default_factory=LossToggles)
    contrastive: str = "dcon"
    pcl_scope: str = "domain"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.cluster, dict):
            self.cluster = ClusterConfig(**self.cluster)
        if isinstance(self.loss_toggles, dict):
            self.loss_toggles = LossToggles(**self.loss_toggles)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

    @property
    def warmup(self):
        # default: first 10% of epochs are contrastive-only
        return self.epochs // 10 if self.warmup_epochs is None else self.warmup_epochs

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 4")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.contrastive not in ("dcon", "infonce"):
            raise ValueError(f"unknown contrastive loss {self.contrastive!r}")
        if self.pcl_scope not in PCL_SCOPES:
            raise ValueError(f"unknown pcl_scope {self.pcl_scope!r}")
        if not self.loss_toggles.any():
            raise ValueError("no loss enabled")
        self.cluster.validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    loss_total: float
    loss_dcon: float
    loss_pmix: float
    loss_pcl: float
    lr: float
    cluster_objective: list
    n_batches: int

    def to_dict(self):
        return asdict(self)


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    size = min(batch_size, n - n % 2)
    return [perm[s:s + size] for s in range(0, n - size + 1, size)]


def compute_step(params: ModelParams, model_config: ModelConfig, tcfg: TrainConfig, X1, X2, domains,
                 prototypes=None, assign=None, mix=None, use_protos=False):
    """Loss components and the summed parameter gradient for one mini-batch.

    ``X1``/``X2`` are the two augmented views. ``assign[m]`` holds the rows'
    centroid indices. ``mix`` is a prebuilt MixBatch over ``X1``.
    """
    toggles = tcfg.loss_toggles
    n = X1.shape[0]
    _, Z, cache = forward(params, np.vstack([X1, X2]), model_config)
    dZ = np.zeros_like(Z)
    parts = {"dcon": 0.0, "pmix": 0.0, "pcl": 0.0}
    if toggles.dcon:
        batch = ContrastiveBatch(Z, np.concatenate([domains, domains]), tcfg.tau)
        fn = dcon if tcfg.contrastive == "dcon" else info_nce
        parts["dcon"], g = fn(batch)
        dZ += g
    if use_protos and toggles.pcl:
        parts["pcl"], g = pcl_loss(Z[:n], assign, prototypes, tcfg.pcl_scope)
        dZ[:n] += g
    grads = backward(params, cache, dZ)
    if use_protos and toggles.pmix:
        _, F, mcache = forward(params, mix.mixed_inputs, model_config)
        parts["pmix"], gF = pmix_loss(F, mix)
        grads = grads + backward(params, mcache, gF)
    return parts, grads


def train(dataset: MultiDomainDataset, model_config: ModelConfig, tcfg: TrainConfig,
          params: ModelParams | None = None, opt: OptimState | None = None, start_epoch: int = 0,
          stop_epoch: int | None = None, on_epoch=None):
    """Runs epochs ``start_epoch .. stop_epoch-1`` and returns ``(params, opt, metrics)``.

    All randomness is keyed on ``(seed, epoch)``, so a run resumed from a
    checkpoint at an epoch boundary replays the unbroken run exactly.
    ``on_epoch(metrics, params, opt, prototypes)`` is called after every epoch.
    """
    tcfg.validate()
    model_config.validate()
    if dataset.d_in != model_config.d_in:
        raise ValueError(f"dataset has {dataset.d_in} features, model expects {model_config.d_in}")
    protos_wanted = tcfg.loss_toggles.pmix or tcfg.loss_toggles.pcl
    if protos_wanted:
        for g in np.unique(dataset.domains):
            size = int(np.sum(dataset.domains == g))
            if size < max(tcfg.cluster.K):
                raise ValueError(f"domain {g} has {size} samples, fewer than k={max(tcfg.cluster.K)}")
    if params is None:
        params = init_model(model_config)
    if opt is None:
        opt = init_optim(params, tcfg.base_lr, tcfg.weight_decay, tcfg.epochs)
    stop_epoch = tcfg.epochs if stop_epoch is None else stop_epoch
    X, doms = dataset.X, dataset.domains
    history = []
    for epoch in range(start_epoch, stop_epoch):
        use_protos = protos_wanted and epoch >= tcfg.warmup
        prototypes = None
        if use_protos:
            _, Zall, _ = forward(params, X, model_config)
            prototypes = extract_prototypes(Zall, doms, tcfg.cluster, tcfg.tau,
                                            seed=[tcfg.seed, _STREAM_CLUSTER, epoch])
        rng = np.random.default_rng([tcfg.seed, _STREAM_BATCH, epoch])
        sums = {"dcon": 0.0, "pmix": 0.0, "pcl": 0.0}
        batches = _batches(len(X), tcfg.batch_size, rng)
        for idx in batches:
            X1 = augment_batch(X[idx], tcfg.augment, rng)
            X2 = augment_batch(X[idx], tcfg.augment, rng)
            assign = mix = None
            if use_protos:
                assign = [p.assignments[idx] for p in prototypes]
                mix = build_mix_batch(X1, assign, prototypes, tcfg.mix_alpha, rng)
            parts, grads = compute_step(params, model_config, tcfg, X1, X2, doms[idx],
                                        prototypes, assign, mix, use_protos)
            step_total = sum(parts.values())
            if not math.isfinite(step_total):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}: {parts}", epoch, params, opt, history)
            for k, v in parts.items():
                sums[k] += v
            adam_step(params, grads, opt, epoch)
        nb = max(len(batches), 1)
        comps = {k: v / nb for k, v in sums.items()}
        m = EpochMetrics(
            epoch=epoch,
            loss_total=comps["dcon"] + comps["pmix"] + comps["pcl"],
            loss_dcon=comps["dcon"],
            loss_pmix=comps["pmix"],
            loss_pcl=comps["pcl"],
            lr=tcfg.base_lr * cosine_multiplier(epoch, opt.total_epochs),
            cluster_objective=[p.objective for p in prototypes] if prototypes else [],
            n_batches=len(batches),
        )
        history.append(m)
        log.debug("epoch %d loss %.6f", epoch, m.loss_total)
        if on_epoch is not None:
            on_epoch(m, params, opt, prototypes)
    return params, opt, history
