"""InfoNCE, domain-wise contrastive loss, and the negative-partition diagnostics.

Batches hold two views per original: rows ``i`` and ``i + N`` form the positive
pair. Every denominator includes the positive term. Losses are averaged over
the ``2N`` anchors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .kernels import masked_xent


@dataclass
class ContrastiveBatch:
    Z: np.ndarray
    domain_ids: np.ndarray
    tau: float = 0.07

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        n2 = self.Z.shape[0]
        if self.Z.ndim != 2 or n2 % 2:
            raise ValueError("Z must have an even number of rows (two views per sample)")
        if self.domain_ids.shape != (n2,):
            raise ValueError("one domain id per row required")
        n = n2 // 2
        if np.any(self.domain_ids[:n] != self.domain_ids[n:]):
            raise ValueError("paired views must share a domain id")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def n_rows(self):
        return self.Z.shape[0]

    def positives(self):
        n2 = self.n_rows
        return (np.arange(n2) + n2 // 2) % n2


@dataclass
class NegativePartition:
    positive: float
    n_alpha: float
    n_beta: float
    n_gamma: float
    epsilon: float
    count_alpha: int
    count_beta: int
    count_gamma: int

    @property
    def total(self):
        return self.n_alpha + self.n_beta + self.n_gamma


def _contrastive(batch: ContrastiveBatch, mask):
    n2 = batch.n_rows
    logits = (batch.Z @ batch.Z.T) / batch.tau
    per_anchor, dlogits = masked_xent(logits, mask, batch.positives())
    loss = float(per_anchor.sum() / n2)
    G = dlogits / n2
    dZ = ((G + G.T) @ batch.Z) / batch.tau
    return loss, dZ


def info_nce_mask(batch: ContrastiveBatch):
    n2 = batch.n_rows
    return ~np.eye(n2, dtype=bool)


def dcon_mask(batch: ContrastiveBatch):
    same = batch.domain_ids[:, None] == batch.domain_ids[None, :]
    return same & info_nce_mask(batch)


def anchor_losses(batch: ContrastiveBatch, domain_wise=True) -> np.ndarray:
    """Per-anchor terms; their mean is ``dcon`` (or ``info_nce`` when not domain-wise)."""
    mask = dcon_mask(batch) if domain_wise else info_nce_mask(batch)
    logits = (batch.Z @ batch.Z.T) / batch.tau
    return masked_xent(logits, mask, batch.positives())[0]


def info_nce(batch: ContrastiveBatch):
    """Mean InfoNCE loss and its gradient with respect to ``Z``."""
    if batch.n_rows < 4:
        raise ValueError("InfoNCE needs at least 4 rows so that a negative exists")
    return _contrastive(batch, info_nce_mask(batch))


def dcon(batch: ContrastiveBatch):
    """Domain-wise contrastive loss: only same-domain rows enter each denominator.

    An anchor whose only same-domain partner is its positive contributes zero.
    """
    return _contrastive(batch, dcon_mask(batch))


def default_epsilon(common) -> float:
    """A quarter of the median pairwise distance among the given common vectors."""
    C = np.asarray(common, dtype=np.float64)
    iu = np.triu_indices(C.shape[0], 1)
    dist = np.linalg.norm(C[:, None, :] - C[None, :, :], axis=2)[iu]
    return 0.25 * float(np.median(dist)) if dist.size else 1.0


def partition_negatives(batch: ContrastiveBatch, common, epsilon=None) -> list[NegativePartition]:
    """Splits every anchor's denominator into same-domain (alpha), cross-domain with
    common part within ``epsilon`` in L2 (beta), and the remaining (gamma) terms.

    ``n_alpha`` contains the positive's term, since the positive shares the domain.
    """
    if common is None:
        raise ValueError("common-feature vectors are required")
    C = np.asarray(common, dtype=np.float64)
    if C.shape[0] != batch.n_rows:
        raise ValueError("one common vector per row required")
    eps = default_epsilon(C) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    E = np.exp((batch.Z @ batch.Z.T) / batch.tau)
    off = info_nce_mask(batch)
    same = batch.domain_ids[:, None] == batch.domain_ids[None, :]
    near = np.linalg.norm(C[:, None, :] - C[None, :, :], axis=2) < eps
    alpha = off & same
    beta = off & ~same & near
    gamma = off & ~same & ~near
    pos = batch.positives()
    out = []
    for i in range(batch.n_rows):
        out.append(NegativePartition(
            positive=float(E[i, pos[i]]),
            n_alpha=float(E[i, alpha[i]].sum()),
            n_beta=float(E[i, beta[i]].sum()),
            n_gamma=float(E[i, gamma[i]].sum()),
            epsilon=eps,
            count_alpha=int(alpha[i].sum()),
            count_beta=int(beta[i].sum()),
            count_gamma=int(gamma[i].sum()),
        ))
    return out


class Suppression(NamedTuple):
    common_energy: float
    domain_energy: float
    rank_deficient: bool


def _r2(design, target):
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    centered = target - target.mean(axis=0)
    ss_tot = float(np.sum(centered ** 2))
    if ss_tot == 0.0:
        return 0.0, rank
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot, rank


def suppression_metric(Z, common, domain_part) -> Suppression:
    """Linear-probe R^2 of the true common and domain components from ``Z``.

    Each R^2 pools all target coordinates. lstsq returns the minimum-norm
    (pseudo-inverse) solution, so rank-deficient ``Z`` still yields a value and
    sets ``rank_deficient``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    design = np.hstack([Z, np.ones((Z.shape[0], 1))])
    rc, rank = _r2(design, np.asarray(common, dtype=np.float64))
    rd, _ = _r2(design, np.asarray(domain_part, dtype=np.float64))
    return Suppression(rc, rd, bool(rank < design.shape[1]))
