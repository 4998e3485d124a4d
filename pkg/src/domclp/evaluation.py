"""Frozen-encoder probes and representation diagnostics."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import masked_xent
from .model import forward


@dataclass
class ProbeReport:
    per_domain: dict
    average: float
    probe: str
    settings: dict = field(default_factory=dict)
    overall: float = 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class ConditionNumberReport:
    kappa: float
    n: int
    singular_values: list
    infinite: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class SimilarityMatrix:
    groups: list
    matrix: np.ndarray

    def to_dict(self):
        m = [[None if np.isnan(v) else float(v) for v in row] for row in self.matrix]
        return {"groups": [list(g) for g in self.groups], "matrix": m}


def _unit(A):
    A = np.asarray(A, dtype=np.float64)
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    return A / np.where(norms > 0, norms, 1.0)


def _report(pred, y, dom, probe, settings):
    pred, y, dom = np.asarray(pred), np.asarray(y), np.asarray(dom)
    per = {}
    for g in np.unique(dom):
        sel = dom == g
        per[str(int(g))] = float(np.mean(pred[sel] == y[sel]))
    avg = float(np.mean(list(per.values()))) if per else 0.0
    overall = float(np.mean(pred == y)) if len(y) else 0.0
    return ProbeReport(per, avg, probe, settings, overall)


def knn_predict(train_emb, train_y, test_emb, k=20, temperature=0.07):
    """Cosine kNN with ``exp(sim / temperature)`` vote weights; ties go to the lowest label."""
    tr = _unit(train_emb)
    te = _unit(test_emb)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(tr) == 0:
        raise ValueError("empty training set")
    if k > len(tr):
        warnings.warn(f"k={k} exceeds the {len(tr)} training points; clamping", stacklevel=2)
        k = len(tr)
    sims = te @ tr.T
    # stable sort on -sim keeps the lowest train index among equal similarities
    nn = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    n_labels = int(train_y.max()) + 1
    votes = np.zeros((len(te), n_labels))
    w = np.exp(np.take_along_axis(sims, nn, axis=1) / temperature)
    rows = np.repeat(np.arange(len(te)), k)
    np.add.at(votes, (rows, train_y[nn].ravel()), w.ravel())
    return np.argmax(votes, axis=1)


def knn_probe(train_emb, train_y, test_emb, test_y, test_domains, k=20, temperature=0.07) -> ProbeReport:
    pred = knn_predict(train_emb, train_y, test_emb, k, temperature)
    return _report(pred, test_y, test_domains, "knn", {"k": int(min(k, len(train_y))), "temperature": temperature})


def softmax_regression_loss(W, b, X, y):
    """Mean cross-entropy of ``softmax(X W + b)`` and its gradients ``(dW, db)``."""
    logits = X @ W + b
    mask = np.ones(logits.shape, dtype=np.uint8)
    per, dlogits = masked_xent(logits, mask, y)
    n = X.shape[0]
    return float(per.mean()), X.T @ dlogits / n, dlogits.sum(axis=0) / n


def fit_linear(train_emb, train_y, n_classes=None, lr=0.1, iters=500):
    X = np.asarray(train_emb, dtype=np.float64)
    y = np.asarray(train_y, dtype=np.int64)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(iters):
        _, dW, db = softmax_regression_loss(W, b, X, y)
        W -= lr * dW
        b -= lr * db
    return W, b


def linear_probe(train_emb, train_y, test_emb, test_y, test_domains, lr=0.1, iters=500, seed=0) -> ProbeReport:
    """Multinomial logistic regression by full-batch gradient descent from zero.

    Zero initialisation and full batches make the fit deterministic; ``seed``
    is recorded only.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(np.unique(train_y)) < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    n_classes = int(max(train_y.max(), np.max(test_y))) + 1
    W, b = fit_linear(train_emb, train_y, n_classes, lr, iters)
    # argmax picks the lowest class on ties, including the all-zero start
    pred = np.argmax(np.asarray(test_emb) @ W + b, axis=1)
    return _report(pred, test_y, test_domains, "linear", {"lr": lr, "iters": iters, "seed": seed})


def condition_number(R, n=10) -> ConditionNumberReport:
    """Ratio of the largest to the n-th largest singular value of the row-centred matrix."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape[0] < n or R.shape[1] < n:
        raise ValueError(f"need >= n rows and columns (n={n}), got shape {R.shape}")
    s = np.linalg.svd(R - R.mean(axis=0), compute_uv=False)
    top = s[:n]
    if top[-1] < 1e-12:
        return ConditionNumberReport(float("inf"), n, top.tolist(), True)
    return ConditionNumberReport(float(top[0] / top[-1]), n, top.tolist(), False)


def similarity_matrix(emb, domains, classes) -> SimilarityMatrix:
    """Mean cosine similarity between every pair of (domain, class) groups.

    Pairs of a sample with itself are excluded; undefined entries are NaN.
    """
    U = _unit(emb)
    domains = np.asarray(domains)
    classes = np.asarray(classes)
    groups = sorted({(int(d), int(c)) for d, c in zip(domains, classes)})
    members = [np.flatnonzero((domains == d) & (classes == c)) for d, c in groups]
    S = U @ U.T
    G = len(groups)
    M = np.full((G, G), np.nan)
    for a in range(G):
        for b in range(a, G):
            block = S[np.ix_(members[a], members[b])]
            if a == b:
                n = len(members[a])
                if n < 2:
                    continue
                val = (block.sum() - np.trace(block)) / (n * (n - 1))
            else:
                val = block.mean()
            M[a, b] = M[b, a] = val
    return SimilarityMatrix(groups, M)


def embed(params, model_config, X, layer="projection"):
    H, Z, _ = forward(params, X, model_config)
    return Z if layer == "projection" else H


def export_embeddings(params, model_config, dataset, path, layer="projection"):
    """Writes ``domain,class,z0..`` rows in dataset order with 17 significant digits."""
    Z = embed(params, model_config, dataset.X, layer)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["domain", "class"] + [f"z{j}" for j in range(Z.shape[1])]) + "\n")
        for d, c, row in zip(dataset.domains, dataset.classes, Z):
            fh.write(f"{d},{c}," + ",".join("%.17g" % v for v in row) + "\n")
    return Z
