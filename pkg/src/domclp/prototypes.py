"""Per-domain multi-granularity k-means prototypes, concentration estimates,
prototype mixup and prototypical contrastive losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import assign_nearest, masked_xent


@dataclass
class ClusterConfig:
    K: list = field(default_factory=lambda: [2, 4, 8])
    max_iters: int = 100
    tol: float = 1e-8
    seed: int = 0

    def validate(self):
        if not self.K or any(int(k) < 1 for k in self.K):
            raise ValueError("K must be a nonempty list of positive cluster counts")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("max_iters must be >= 1 and tol > 0")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list
    n_iter: int


@dataclass
class PrototypeSet:
    """Centroids of one granularity; domain blocks are concatenated in sorted domain order."""

    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    phi: np.ndarray
    block_domains: np.ndarray
    objective: float = 0.0

    @property
    def n_centroids(self):
        return self.centroids.shape[0]

    def block_of(self, idx):
        return self.block_domains[np.asarray(idx) // self.k]

    def to_json(self):
        counts = np.bincount(self.assignments, minlength=self.n_centroids)
        return {
            "granularity": int(self.k),
            "domains": {
                str(int(g)): {
                    "centroids": self.centroids[b * self.k:(b + 1) * self.k].tolist(),
                    "phi": self.phi[b * self.k:(b + 1) * self.k].tolist(),
                    "assignment_counts": counts[b * self.k:(b + 1) * self.k].tolist(),
                }
                for b, g in enumerate(self.block_domains)
            },
            "objective": self.objective,
        }


@dataclass
class MixBatch:
    partner: np.ndarray
    lam: np.ndarray
    mixed_inputs: np.ndarray
    mixed_prototypes: list


def _sse(X, C, labels):
    return float(np.sum((X - C[labels]) ** 2))


def kmeans_pp_init(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _repair_empty(X, C, labels, dist, k):
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        # farthest point among clusters that can spare one
        donors = counts[labels] > 1
        if not donors.any():
            break
        cand = np.where(donors, dist, -1.0)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
        dist[i] = 0.0
        C[j] = X[i]
    return labels


def kmeans(points, k, config: ClusterConfig | None = None, rng=None) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the largest centroid move drops below ``tol``. Empty clusters
    take the point farthest from its current centroid. ``history`` records the
    within-cluster sum of squares after every assignment and every update.
    """
    config = config or ClusterConfig()
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < k:
        raise ValueError(f"kmeans needs at least k={k} points, got {n}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    C = kmeans_pp_init(X, k, rng)
    history = []
    it = 0
    for it in range(1, config.max_iters + 1):
        labels, dist = assign_nearest(X, C)
        labels = _repair_empty(X, C, labels, dist, k)
        history.append(_sse(X, C, labels))
        newC = np.array([X[labels == j].mean(axis=0) for j in range(k)])
        history.append(_sse(X, newC, labels))
        shift = float(np.max(np.linalg.norm(newC - C, axis=1)))
        C = newC
        if shift < config.tol:
            break
    return KMeansResult(C, labels, history[-1], history, it)


def _normalize_rows(A):
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    return np.where(norms > 0, A / np.where(norms > 0, norms, 1.0), A)


def estimate_phi(Z, pset: PrototypeSet, tau: float, smooth=10.0) -> np.ndarray:
    """Per-centroid concentration: mean distance to the centroid divided by
    ``log(size + smooth)``, rescaled to average ``tau`` and clamped to
    ``[tau/10, 10 tau]``.

    Singleton clusters take the largest estimate among the other clusters.
    All-zero spreads map to ``tau`` everywhere.
    """
    Z = np.asarray(Z, dtype=np.float64)
    sizes = np.bincount(pset.assignments, minlength=pset.n_centroids).astype(np.float64)
    dist = np.linalg.norm(Z - pset.centroids[pset.assignments], axis=1)
    spread = np.bincount(pset.assignments, weights=dist, minlength=pset.n_centroids)
    safe = np.maximum(sizes, 1.0)
    raw = spread / (safe * np.log(safe + smooth))
    single = sizes <= 1
    if single.any() and not single.all():
        # a lone member says nothing about tightness; treat it as the loosest cluster
        raw[single] = raw[~single].max()
    mean = raw.mean()
    if mean <= 0:
        return np.full(pset.n_centroids, float(tau))
    return np.clip(raw * (tau / mean), tau / 10.0, 10.0 * tau)


def extract_prototypes(Z, domain_ids, config: ClusterConfig, tau=0.07, seed=None) -> list[PrototypeSet]:
    """Clusters each domain's rows separately for every k in ``config.K``.

    RNG streams are keyed by ``(seed, domain, granularity index)`` so results do
    not depend on evaluation order.
    """
    config.validate()
    Z = np.asarray(Z, dtype=np.float64)
    domain_ids = np.asarray(domain_ids, dtype=np.int64)
    seed = config.seed if seed is None else seed
    base = [int(v) for v in np.atleast_1d(seed)]
    doms = np.unique(domain_ids)
    for g in doms:
        size = int(np.sum(domain_ids == g))
        if size < max(config.K):
            raise ValueError(f"domain {g} has {size} samples, fewer than k={max(config.K)}")
    out = []
    for m, k in enumerate(int(v) for v in config.K):
        cents = []
        assign = np.empty(len(Z), dtype=np.int64)
        objective = 0.0
        for b, g in enumerate(doms):
            rows = np.flatnonzero(domain_ids == g)
            rng = np.random.default_rng(base + [int(g), m])
            res = kmeans(Z[rows], k, config, rng)
            cents.append(_normalize_rows(res.centroids))
            assign[rows] = res.assignments + b * k
            objective += res.objective
        pset = PrototypeSet(k, np.vstack(cents), assign, np.empty(0), doms, objective)
        pset.phi = estimate_phi(Z, pset, tau)
        out.append(pset)
    return out


def sample_partners(n, alpha, rng):
    partner = rng.integers(0, n, size=n)
    lam = rng.beta(alpha, alpha, size=n)
    return partner, lam


def build_mix_batch(X, assignments, prototype_sets, alpha=4.0, rng=None, partner=None, lam=None) -> MixBatch:
    """Mixes each row with a uniformly drawn batch partner (self and any domain allowed).

    ``assignments[m]`` holds the batch rows' centroid indices for granularity m.
    Mixed prototypes are plain convex combinations, not renormalized.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if partner is None or lam is None:
        p, l = sample_partners(n, alpha, rng)
        partner = p if partner is None else partner
        lam = l if lam is None else lam
    partner = np.asarray(partner, dtype=np.int64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
    lc = lam[:, None]
    # self-pairs are returned unchanged rather than through rounding of the mix
    same = (partner == np.arange(n))[:, None]

    def mix(A):
        return np.where(same, A, lc * A + (1.0 - lc) * A[partner])

    mixed_inputs = mix(X)
    mixed_protos = [mix(pset.centroids[np.asarray(a)]) for a, pset in zip(assignments, prototype_sets)]
    return MixBatch(partner, lam, mixed_inputs, mixed_protos)


def pmix_loss(F, mix: MixBatch):
    """Mean (over rows and granularities) Euclidean distance to the mixed prototypes.

    The gradient at exactly zero distance is taken as 0.
    """
    F = np.asarray(F, dtype=np.float64)
    n, M = F.shape[0], len(mix.mixed_prototypes)
    total = 0.0
    grad = np.zeros_like(F)
    for T in mix.mixed_prototypes:
        diff = F - T
        dist = np.linalg.norm(diff, axis=1)
        total += dist.sum()
        nz = dist > 0
        grad[nz] += diff[nz] / dist[nz, None]
    scale = 1.0 / (n * M)
    return float(total * scale), grad * scale


PCL_SCOPES = ("domain", "all")


def pcl_loss(Z, assignments, prototype_sets, scope="domain"):
    """Prototypical contrastive loss with logits ``z . p_j / phi_j``.

    ``assignments[m]`` gives each row's own centroid in ``prototype_sets[m]``.
    With ``scope="domain"`` the softmax runs over the k centroids of the row's
    own domain block; ``scope="all"`` uses every centroid of every domain.
    """
    if scope not in PCL_SCOPES:
        raise ValueError(f"unknown pcl scope {scope!r}")
    Z = np.asarray(Z, dtype=np.float64)
    n, M = Z.shape[0], len(prototype_sets)
    total = 0.0
    grad = np.zeros_like(Z)
    for a, pset in zip(assignments, prototype_sets):
        a = np.asarray(a, dtype=np.int64)
        P = pset.centroids
        logits = (Z @ P.T) / pset.phi[None, :]
        if scope == "domain":
            block = np.arange(pset.n_centroids) // pset.k
            mask = (block[None, :] == (a // pset.k)[:, None]).astype(np.uint8)
        else:
            mask = np.ones(logits.shape, dtype=np.uint8)
        per, dlogits = masked_xent(logits, mask, a)
        total += per.sum()
        grad += (dlogits / pset.phi[None, :]) @ P
    scale = 1.0 / (n * M)
    return float(total * scale), grad * scale
