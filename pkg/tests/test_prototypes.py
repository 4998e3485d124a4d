import itertools
import math

import numpy as np
import pytest

from domclp.data import ToyConfig, generate_toy
from domclp.prototypes import (ClusterConfig, MixBatch, PrototypeSet, build_mix_batch, estimate_phi,
                               extract_prototypes, kmeans, pcl_loss, pmix_loss, sample_partners)

from conftest import fd_grad, rel_error


def exhaustive_kmeans(X, k):
    best = (math.inf, None)
    for labels in itertools.product(range(k), repeat=len(X)):
        labels = np.array(labels)
        if len(set(labels)) < k:
            continue
        sse = sum(np.sum((X[labels == j] - X[labels == j].mean(axis=0)) ** 2) for j in range(k))
        best = min(best, (sse, tuple(labels)), key=lambda t: t[0])
    return best


def test_kmeans_four_points_optimum():
    X = np.array([[0.0], [0.1], [10.0], [10.1]])
    sse, labels = exhaustive_kmeans(X, 2)
    for seed in range(10):
        res = kmeans(X, 2, rng=np.random.default_rng(seed))
        assert res.objective == pytest.approx(sse, abs=1e-12)
        assert sorted(res.centroids.ravel().round(12).tolist()) == [0.05, 10.05]
        a = res.assignments
        assert a[0] == a[1] != a[2] == a[3]


def test_kmeans_small_random_instances_reach_a_local_optimum(rng):
    for _ in range(5):
        X = rng.standard_normal((7, 2))
        res = kmeans(X, 3, rng=rng)
        sse, _ = exhaustive_kmeans(X, 3)
        assert res.objective >= sse - 1e-12
        # Lloyd fixed point: every point sits at its nearest centroid
        d = np.sum((X[:, None] - res.centroids[None]) ** 2, axis=2)
        assert np.array_equal(np.argmin(d, axis=1), res.assignments)


def test_kmeans_saturation_and_single_cluster(rng):
    X = rng.standard_normal((5, 3))
    res = kmeans(X, 5, rng=rng)
    assert res.objective == pytest.approx(0.0, abs=1e-24)
    one = kmeans(X, 1, rng=rng)
    assert np.allclose(one.centroids[0], X.mean(axis=0), atol=1e-15)


def test_kmeans_monotone_history(rng):
    X = np.vstack([rng.standard_normal((60, 2)) + c for c in ([0, 0], [3, 0], [0, 3])])
    for seed in range(5):
        res = kmeans(X, 5, rng=np.random.default_rng(seed))
        h = np.array(res.history)
        assert np.all(np.diff(h) <= 1e-12 * h[0])


def test_kmeans_repairs_empty_clusters():
    # duplicated points force k-means++ to reuse a location
    X = np.array([[0.0], [0.0], [0.0], [5.0]])
    res = kmeans(X, 3, rng=np.random.default_rng(0))
    assert np.all(np.bincount(res.assignments, minlength=3) >= 1)


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 2)), 3)


def test_extract_prototypes_block_structure(rng):
    Z = rng.standard_normal((40, 3))
    dom = np.repeat([0, 1], 20)
    sets = extract_prototypes(Z, dom, ClusterConfig(K=[3, 5]))
    assert [s.n_centroids for s in sets] == [6, 10]
    for s in sets:
        assert np.all(s.assignments[:20] < s.k) and np.all(s.assignments[20:] >= s.k)
        assert np.allclose(np.linalg.norm(s.centroids, axis=1), 1.0, atol=1e-9)
        assert np.all(np.bincount(s.assignments, minlength=s.n_centroids) >= 1)
        assert np.all(s.phi > 0)
    # order-independent and seeded
    again = extract_prototypes(Z, dom, ClusterConfig(K=[3, 5]))
    assert np.array_equal(again[1].centroids, sets[1].centroids)


def test_extract_prototypes_small_domain_names_it():
    Z = np.zeros((7, 2))
    with pytest.raises(ValueError, match="domain 1"):
        extract_prototypes(Z, np.array([0, 0, 0, 0, 0, 1, 1]), ClusterConfig(K=[3]))


def test_noise_free_clusters_align_with_class_means():
    ds = generate_toy(ToyConfig(2, 3, 10, 2, 1, 3, class_separation=2.0, noise_sigma=0.0, seed=4))
    sets = extract_prototypes(ds.X, ds.domains, ClusterConfig(K=[3]))
    s = sets[0]
    for g in range(2):
        means = np.array([ds.X[(ds.domains == g) & (ds.classes == c)].mean(axis=0) for c in range(3)])
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        block = s.centroids[g * 3:(g + 1) * 3]
        for row in means:
            assert np.min(np.linalg.norm(block - row, axis=1)) < 1e-6


def _pset(centroids, assignments, k, phi=None, domains=(0,)):
    C = np.asarray(centroids, dtype=float)
    return PrototypeSet(k, C, np.asarray(assignments), np.ones(len(C)) if phi is None else np.asarray(phi, float),
                        np.asarray(domains))


def test_phi_ratio_two_to_one():
    Z = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 11.0], [0.0, 9.0]])
    ps = _pset([[0.0, 0.0], [0.0, 10.0]], [0, 0, 1, 1], 2)
    phi = estimate_phi(Z, ps, tau=0.07)
    assert phi[0] / phi[1] == pytest.approx(2.0, rel=1e-12)
    assert phi.mean() == pytest.approx(0.07, abs=1e-12)


def test_phi_zero_spread_and_clamp():
    Z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    ps = _pset([[1.0, 0.0], [0.0, 1.0]], [0, 0, 1, 1], 2)
    assert np.array_equal(estimate_phi(Z, ps, 0.07), [0.07, 0.07])
    Z2 = Z.copy()
    Z2[0, 0] = 1.0 + 1e-9
    Z2[1, 0] = 1.0 - 1e-9
    Z2[2, 1] = 5.0
    Z2[3, 1] = -3.0
    phi = estimate_phi(Z2, ps, 0.07)
    assert phi.min() == pytest.approx(0.007) and phi.max() <= 0.7


def test_phi_singleton_takes_loosest():
    Z = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]])
    ps = _pset([[0.0, 0.0], [5.0, 5.0]], [0, 0, 0, 1], 2)
    phi = estimate_phi(Z, ps, 0.07)
    assert phi[0] == phi[1] == pytest.approx(0.07)


def test_beta_moments():
    rng = np.random.default_rng(0)
    _, lam = sample_partners(10_000, 4.0, rng)
    se_mean = math.sqrt(1 / 36 / 10_000)
    assert abs(lam.mean() - 0.5) < 3 * se_mean
    # standard error of the sample variance: sqrt((mu4 - sigma^4) / n), mu4 estimated
    mu4 = float(np.mean((lam - 0.5) ** 4))
    se_var = math.sqrt((mu4 - (1 / 36) ** 2) / 10_000)
    assert abs(lam.var(ddof=1) - 1 / 36) < 3 * se_var


def _two_sets(rng, n=6):
    X = rng.standard_normal((n, 3))
    sets = []
    for k in (2, 3):
        C = rng.standard_normal((2 * k, 2))
        C /= np.linalg.norm(C, axis=1, keepdims=True)
        a = np.concatenate([rng.integers(0, k, n // 2), k + rng.integers(0, k, n - n // 2)])
        sets.append(PrototypeSet(k, C, a, rng.uniform(0.05, 0.2, 2 * k), np.array([0, 1])))
    return X, sets


def test_mix_identities(rng):
    X, sets = _two_sets(rng)
    assign = [s.assignments for s in sets]
    mix = build_mix_batch(X, assign, sets, partner=rng.integers(0, 6, 6), lam=1.0)
    assert np.array_equal(mix.mixed_inputs, X)
    for s, P in zip(sets, mix.mixed_prototypes):
        assert np.array_equal(P, s.centroids[s.assignments])
    self_mix = build_mix_batch(X, assign, sets, partner=np.arange(6), lam=rng.random(6))
    assert np.array_equal(self_mix.mixed_inputs, X)


def test_mix_convexity(rng):
    X, sets = _two_sets(rng)
    mix = build_mix_batch(X, [s.assignments for s in sets], sets, 4.0, rng)
    assert np.all((mix.lam >= 0) & (mix.lam <= 1))
    for P in mix.mixed_prototypes:
        assert np.all(np.linalg.norm(P, axis=1) <= 1 + 1e-12)


def test_pmix_hand_values():
    mix = MixBatch(np.array([0]), np.array([1.0]), np.zeros((1, 2)), [np.array([[1.0, 0.0]])])
    loss, grad = pmix_loss(np.zeros((1, 2)), mix)
    assert loss == 1.0 and np.array_equal(grad, [[-1.0, 0.0]])
    loss0, grad0 = pmix_loss(np.array([[1.0, 0.0]]), mix)
    assert loss0 == 0.0 and np.all(grad0 == 0)


def test_pmix_double_loop_and_fd(rng):
    N, M = 5, 2
    F = rng.standard_normal((N, 3))
    T = [rng.standard_normal((N, 3)) for _ in range(M)]
    mix = MixBatch(np.arange(N), np.ones(N), np.zeros((N, 3)), T)
    ref = sum(math.sqrt(sum((F[i, c] - T[m][i, c]) ** 2 for c in range(3))) for i in range(N) for m in range(M))
    loss, grad = pmix_loss(F, mix)
    assert loss == pytest.approx(ref / (N * M), abs=1e-10)
    assert rel_error(grad, fd_grad(lambda: pmix_loss(F, mix)[0], F)) < 1e-4


def pcl_direct(Z, sets, scope):
    total = 0.0
    for s in sets:
        for i in range(len(Z)):
            own = s.assignments[i]
            den = 0.0
            for j in range(s.n_centroids):
                if scope == "all" or j // s.k == own // s.k:
                    den += math.exp(float(Z[i] @ s.centroids[j]) / s.phi[j])
            total += -math.log(math.exp(float(Z[i] @ s.centroids[own]) / s.phi[own]) / den)
    return total / (len(Z) * len(sets))


@pytest.mark.parametrize("scope", ["domain", "all"])
def test_pcl_double_loop_and_fd(rng, scope):
    Z, sets = _two_sets(rng)
    Z = Z[:, :2] / np.linalg.norm(Z[:, :2], axis=1, keepdims=True)
    assign = [s.assignments for s in sets]
    loss, grad = pcl_loss(Z, assign, sets, scope)
    assert loss == pytest.approx(pcl_direct(Z, sets, scope), abs=1e-10)
    assert rel_error(grad, fd_grad(lambda: pcl_loss(Z, assign, sets, scope)[0], Z)) < 1e-4


def test_pcl_uniform_softmax():
    C = np.tile([[0.0, 1.0]], (6, 1))
    s = PrototypeSet(3, C, np.array([0, 4]), np.full(6, 0.1), np.array([0, 1]))
    Z = np.array([[1.0, 0.0], [0.6, 0.8]])
    assert pcl_loss(Z, [s.assignments], [s], "all")[0] == pytest.approx(math.log(6), abs=1e-12)
    assert pcl_loss(Z, [s.assignments], [s], "domain")[0] == pytest.approx(math.log(3), abs=1e-12)


def test_pcl_two_centroid_example():
    s = PrototypeSet(1, np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0]), np.array([0.5, 0.5]), np.array([0, 1]))
    z = np.array([[0.5, 0.0]])
    # z.p_own / phi = 1, z.p_other / phi = 0; cross-domain denominator
    loss, _ = pcl_loss(z, [s.assignments], [s], "all")
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert round(loss, 4) == 0.3133


def test_pcl_rejects_unknown_scope(rng):
    Z, sets = _two_sets(rng)
    with pytest.raises(ValueError):
        pcl_loss(Z[:, :2], [s.assignments for s in sets], sets, "global")
