"""Synthetic multi-domain data, source/target splits, augmentation and CSV I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    c: np.ndarray
    d: np.ndarray


@dataclass(frozen=True)
class DomainSample:
    x: np.ndarray
    domain_id: int
    class_id: Optional[int] = None
    truth: Optional[GroundTruth] = None


@dataclass
class MultiDomainDataset:
    """Column-oriented store of samples.

    ``classes`` uses -1 for missing labels; ``common``/``domain`` are None when
    no ground-truth decomposition is known.
    """

    X: np.ndarray
    domains: np.ndarray
    classes: np.ndarray
    n_domains: int
    n_classes: int
    common: Optional[np.ndarray] = None
    domain_part: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.X.ndim != 2:
            raise DataError("X must be a 2-D array")
        n = self.X.shape[0]
        if self.domains.shape != (n,) or self.classes.shape != (n,):
            raise DataError("label arrays must have one entry per sample")
        if not np.all(np.isfinite(self.X)):
            raise DataError("non-finite feature values")
        if n and (self.domains.min() < 0 or self.domains.max() >= self.n_domains):
            raise DataError("domain id out of range")
        if n and self.classes.max() >= self.n_classes:
            raise DataError("class id out of range")
        if (self.common is None) != (self.domain_part is None):
            raise DataError("common and domain parts must be given together")
        if self.common is not None:
            self.common = np.asarray(self.common, dtype=np.float64)
            self.domain_part = np.asarray(self.domain_part, dtype=np.float64)
            if self.common.shape != self.X.shape or self.domain_part.shape != self.X.shape:
                raise DataError("truth arrays must match X")

    def __len__(self):
        return self.X.shape[0]

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.common is not None

    @property
    def has_classes(self) -> bool:
        return len(self) > 0 and bool(np.all(self.classes >= 0))

    @property
    def samples(self) -> list[DomainSample]:
        out = []
        for i in range(len(self)):
            truth = None
            if self.has_truth:
                truth = GroundTruth(self.common[i], self.domain_part[i])
            cls = int(self.classes[i])
            out.append(DomainSample(self.X[i], int(self.domains[i]), None if cls < 0 else cls, truth))
        return out

    def subset(self, idx) -> "MultiDomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MultiDomainDataset(
            X=self.X[idx],
            domains=self.domains[idx],
            classes=self.classes[idx],
            n_domains=self.n_domains,
            n_classes=self.n_classes,
            common=None if self.common is None else self.common[idx],
            domain_part=None if self.domain_part is None else self.domain_part[idx],
        )

    def counts(self) -> dict:
        """Per-domain and per-class sample counts (JSON friendly)."""
        dom = {str(g): int(np.sum(self.domains == g)) for g in range(self.n_domains)}
        cls = {str(c): int(np.sum(self.classes == c)) for c in range(self.n_classes)}
        return {"n_samples": len(self), "per_domain": dom, "per_class": cls}


@dataclass
class ToyConfig:
    n_domains: int = 3
    n_classes: int = 4
    samples_per_class_per_domain: int = 50
    d_common: int = 2
    d_domain: int = 1
    ambient_dim: int = 3
    class_separation: float = 1.0
    domain_separation: float = 1.0
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if self.n_domains < 2 or self.n_classes < 2:
            raise DataError("n_domains and n_classes must be >= 2")
        if self.samples_per_class_per_domain < 1:
            raise DataError("samples_per_class_per_domain must be >= 1")
        if self.d_common < 1 or self.d_domain < 1:
            raise DataError("d_common and d_domain must be >= 1")
        if self.ambient_dim < self.d_common + self.d_domain:
            raise DataError(
                f"ambient_dim={self.ambient_dim} is smaller than d_common + d_domain "
                f"= {self.d_common + self.d_domain}"
            )
        if self.class_separation <= 0 or self.domain_separation <= 0 or self.noise_sigma < 0:
            raise DataError("separations must be positive and noise_sigma nonnegative")


@dataclass
class SplitSpec:
    target_domains: frozenset = field(default_factory=frozenset)
    label_fraction: float = 0.05
    validation_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.target_domains = frozenset(int(g) for g in self.target_domains)
        if not 0 < self.label_fraction <= 1:
            raise DataError("label_fraction must be in (0, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise DataError("validation_fraction must be in [0, 1)")


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.05
    scale_jitter: tuple = (0.8, 1.2)
    mask_fraction: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_jitter
        self.scale_jitter = (float(lo), float(hi))
        if not 0 < lo <= hi:
            raise DataError("scale_jitter must satisfy 0 < lo <= hi")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be nonnegative")
        if not 0 <= self.mask_fraction < 1:
            raise DataError("mask_fraction must be in [0, 1)")


def _separated_points(n, dim, sep, rng, attempts=1000):
    # uniform in a ball whose volume leaves room for n points at spacing sep
    radius = sep * max(1.0, n ** (1.0 / dim))
    for _ in range(attempts):
        direction = rng.standard_normal((n, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        r = radius * rng.random(n) ** (1.0 / dim)
        pts = direction * r[:, None]
        if all(np.linalg.norm(pts[a] - pts[b]) >= sep for a, b in combinations(range(n), 2)):
            return pts
    raise DataError(f"could not place {n} points {sep} apart in {dim} dims after {attempts} attempts")


def generate_toy(config: ToyConfig) -> MultiDomainDataset:
    """Samples ``x = c_class + d_domain + noise`` with c and d in orthogonal coordinate blocks.

    Class vectors occupy the first ``d_common`` coordinates and domain vectors
    the next ``d_domain``; any remaining ambient coordinates carry noise only.
    Samples are ordered domain-major, then class, then replicate.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dc, dd, D = config.d_common, config.d_domain, config.ambient_dim
    class_vecs = np.zeros((config.n_classes, D))
    class_vecs[:, :dc] = _separated_points(config.n_classes, dc, config.class_separation, rng)
    domain_vecs = np.zeros((config.n_domains, D))
    domain_vecs[:, dc:dc + dd] = _separated_points(config.n_domains, dd, config.domain_separation, rng)

    per = config.samples_per_class_per_domain
    domains = np.repeat(np.arange(config.n_domains), config.n_classes * per)
    classes = np.tile(np.repeat(np.arange(config.n_classes), per), config.n_domains)
    common = class_vecs[classes]
    dpart = domain_vecs[domains]
    noise = config.noise_sigma * rng.standard_normal((len(domains), D))
    X = (common + dpart) + noise
    return MultiDomainDataset(X, domains, classes, config.n_domains, config.n_classes, common, dpart)


def augment_batch(X, config: AugmentConfig, rng) -> np.ndarray:
    """Scale jitter, additive Gaussian noise, then zeroing of a random coordinate subset per row."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    lo, hi = config.scale_jitter
    scale = rng.uniform(lo, hi, size=(n, 1)) if hi > lo else np.full((n, 1), lo)
    out = X * scale
    if config.noise_sigma > 0:
        out = out + config.noise_sigma * rng.standard_normal((n, d))
    n_mask = int(math.floor(config.mask_fraction * d))
    if n_mask > 0:
        drop = np.argsort(rng.random((n, d)), axis=1)[:, :n_mask]
        out[np.arange(n)[:, None], drop] = 0.0
    return out


def augment(x, config: AugmentConfig, rng) -> np.ndarray:
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], config, rng)[0]


def _largest_remainder(quotas, total, caps):
    base = np.minimum(np.maximum(np.floor(quotas).astype(np.int64), 1), caps)
    left = int(total - base.sum())
    if left > 0:
        # stable sort keeps ties in cell order
        order = np.argsort(-(quotas - np.floor(quotas)), kind="stable")
        for j in order:
            if left == 0:
                break
            if base[j] < caps[j]:
                base[j] += 1
                left -= 1
    return base


def split(dataset: MultiDomainDataset, spec: SplitSpec):
    """Returns ``(pretrain, labeled, validation, target)``.

    Validation is carved out of every (domain, class) source cell by rounding
    ``validation_fraction * cell``. The labeled subset draws
    ``round(label_fraction * n_source)`` samples from pretrain, allocated to
    cells in proportion to their size (largest remainder, at least one each).
    """
    if any(g < 0 or g >= dataset.n_domains for g in spec.target_domains):
        raise DataError("target domain id out of range")
    rng = np.random.default_rng(spec.seed)
    is_target = np.isin(dataset.domains, sorted(spec.target_domains))
    source = np.flatnonzero(~is_target)
    if len(source) == 0:
        raise DataError("no source domain remains after removing target domains")
    n_src = len(source)
    total_labeled = int(round(spec.label_fraction * n_src))
    if spec.label_fraction * n_src < dataset.n_classes:
        raise DataError("label_fraction too small to represent every class")

    cells = {}
    for i in source:
        cells.setdefault((int(dataset.domains[i]), int(dataset.classes[i])), []).append(i)
    keys = sorted(cells)
    pre_cells, val_idx = [], []
    for key in keys:
        idx = rng.permutation(np.asarray(cells[key]))
        n_val = int(round(spec.validation_fraction * len(idx)))
        if n_val >= len(idx):
            raise DataError(f"validation_fraction leaves cell {key} empty")
        val_idx.extend(idx[:n_val])
        pre_cells.append(idx[n_val:])

    sizes = np.array([len(c) for c in pre_cells])
    n_pre = int(sizes.sum())
    total_labeled = min(max(total_labeled, len(keys)), n_pre)
    quotas = total_labeled * sizes / n_pre
    alloc = _largest_remainder(quotas, total_labeled, sizes)
    lab_idx = []
    for cell, k in zip(pre_cells, alloc):
        lab_idx.extend(cell[:k])

    pre_idx = np.sort(np.concatenate(pre_cells))
    return (
        dataset.subset(pre_idx),
        dataset.subset(np.sort(np.asarray(lab_idx, dtype=np.int64))),
        dataset.subset(np.sort(np.asarray(val_idx, dtype=np.int64))),
        dataset.subset(np.flatnonzero(is_target)),
    )


def save_dataset(dataset: MultiDomainDataset, path) -> None:
    d = dataset.d_in
    header = ["domain", "class"] + [f"x{j}" for j in range(d)]
    if dataset.has_truth:
        header += [f"c{j}" for j in range(d)] + [f"d{j}" for j in range(d)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(dataset)):
            vals = [dataset.X[i]]
            if dataset.has_truth:
                vals += [dataset.common[i], dataset.domain_part[i]]
            nums = ",".join("%.17g" % v for v in np.concatenate(vals))
            fh.write(f"{dataset.domains[i]},{dataset.classes[i]},{nums}\n")


def _parse_header(cols, path):
    if cols[:2] != ["domain", "class"]:
        raise DataError(f"{path}:1: header must start with 'domain,class'")
    rest = cols[2:]
    d = sum(1 for c in rest if c.startswith("x"))
    expect = [f"x{j}" for j in range(d)]
    if rest == expect:
        return d, False
    if rest == expect + [f"c{j}" for j in range(d)] + [f"d{j}" for j in range(d)]:
        return d, True
    raise DataError(f"{path}:1: unknown header columns {','.join(rest)!r}")


def load_dataset(path, n_domains=None, n_classes=None, d_in=None) -> MultiDomainDataset:
    """Parses the CSV written by :func:`save_dataset`.

    ``n_domains``/``n_classes`` default to one past the largest id seen;
    ``d_in``, when given, is enforced against the header and every row.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    d, truth = _parse_header(lines[0].strip().split(","), path)
    if d_in is not None and d != d_in:
        raise DataError(f"{path}:1: header has {d} feature columns, expected {d_in}")
    width = 2 + d * (3 if truth else 1)
    doms, clss, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(parts)}")
        try:
            doms.append(int(parts[0]))
            clss.append(int(parts[1]))
            rows.append([float(p) for p in parts[2:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if doms[-1] < 0 or clss[-1] < -1:
            raise DataError(f"{path}:{lineno}: negative label")
    arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), width - 2)
    doms = np.asarray(doms, dtype=np.int64)
    clss = np.asarray(clss, dtype=np.int64)
    nd = n_domains if n_domains is not None else (int(doms.max()) + 1 if len(doms) else 0)
    nc = n_classes if n_classes is not None else max(int(clss.max()) + 1 if len(clss) else 0, 0)
    common = arr[:, d:2 * d] if truth else None
    dpart = arr[:, 2 * d:] if truth else None
    return MultiDomainDataset(arr[:, :d], doms, clss, nd, nc, common, dpart)
