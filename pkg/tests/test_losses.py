import math

import numpy as np
import pytest

from domclp.losses import (ContrastiveBatch, anchor_losses, dcon, default_epsilon, info_nce,
                           partition_negatives, suppression_metric)

from conftest import fd_grad, rel_error


def direct_terms(Z, dom, tau, domain_wise):
    n2 = len(Z)
    out = []
    for i in range(n2):
        pos = (i + n2 // 2) % n2
        den = 0.0
        for k in range(n2):
            if k != i and (not domain_wise or dom[k] == dom[i]):
                den += math.exp(float(Z[i] @ Z[k]) / tau)
        out.append(-math.log(math.exp(float(Z[i] @ Z[pos]) / tau) / den))
    return np.array(out)


def random_batch(rng, n=4, d=3, n_domains=2, tau=0.5):
    Z = rng.standard_normal((2 * n, d))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    dom = rng.integers(0, n_domains, n)
    return ContrastiveBatch(Z, np.concatenate([dom, dom]), tau)


def test_info_nce_hand_example():
    Z = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    b = ContrastiveBatch(Z, np.zeros(4, dtype=int), 1.0)
    terms = anchor_losses(b, domain_wise=False)
    assert terms[0] == pytest.approx(math.log(2 + math.exp(-1)), abs=1e-12)
    assert round(float(terms[0]), 4) == 0.8620
    # every anchor sees the same similarity pattern
    assert info_nce(b)[0] == pytest.approx(math.log(2 + math.exp(-1)), abs=1e-12)


def test_dcon_hand_example():
    # anchor row 0; positive row 3; one same-domain negative (row 1) whose own pair (row 4)
    # sits far away so its term is below double precision relative to the rest
    Z = np.array([[1.0, 0.0], [-1.0, 0.0], [0.3, 0.2], [0.0, 1.0], [-50.0, 0.0], [0.2, 0.4]])
    b = ContrastiveBatch(Z, np.array([0, 0, 1, 0, 0, 1]), 1.0)
    term = anchor_losses(b)[0]
    assert term == pytest.approx(-math.log(1 / (1 + math.exp(-1))), abs=1e-15)
    assert round(float(term), 4) == 0.3133


def test_identical_rows_give_log_2n_minus_1():
    Z = np.tile([[0.6, 0.8]], (8, 1))
    b = ContrastiveBatch(Z, np.zeros(8, dtype=int), 0.1)
    assert np.allclose(anchor_losses(b, False), math.log(7), atol=1e-12)


def test_single_domain_dcon_equals_info_nce(rng):
    b = random_batch(rng, n=5, n_domains=1)
    l1, g1 = info_nce(b)
    l2, g2 = dcon(b)
    assert l1 == l2 and np.array_equal(g1, g2)


def test_one_original_per_domain_gives_zero():
    rng = np.random.default_rng(5)
    Z = rng.standard_normal((6, 3))
    b = ContrastiveBatch(Z, np.array([0, 1, 2, 0, 1, 2]), 0.2)
    loss, grad = dcon(b)
    assert loss == 0.0 and np.all(grad == 0)


@pytest.mark.parametrize("domain_wise", [True, False])
def test_matches_direct_oracle(rng, domain_wise):
    for _ in range(10):
        b = random_batch(rng, n=4, n_domains=3, tau=0.3)
        ref = direct_terms(b.Z, b.domain_ids, b.tau, domain_wise)
        assert np.allclose(anchor_losses(b, domain_wise), ref, rtol=0, atol=1e-10)
        fn = dcon if domain_wise else info_nce
        assert fn(b)[0] == pytest.approx(ref.mean(), abs=1e-10)


@pytest.mark.parametrize("fn", [info_nce, dcon])
def test_gradient_finite_differences(fn, rng):
    b = random_batch(rng, n=4, n_domains=2, tau=0.5)
    _, g = fn(b)
    assert rel_error(g, fd_grad(lambda: fn(b)[0], b.Z)) < 1e-4


def test_info_nce_needs_four_rows():
    with pytest.raises(ValueError):
        info_nce(ContrastiveBatch(np.eye(2), np.zeros(2, dtype=int)))


def test_batch_invariants():
    with pytest.raises(ValueError):
        ContrastiveBatch(np.eye(3), np.zeros(3, dtype=int))
    with pytest.raises(ValueError):
        ContrastiveBatch(np.eye(4), np.array([0, 1, 1, 1]))
    with pytest.raises(ValueError):
        ContrastiveBatch(np.eye(4), np.zeros(4, dtype=int), tau=0.0)


def test_loss_bounds(rng):
    b = random_batch(rng, n=6, n_domains=2, tau=0.2)
    terms = anchor_losses(b, False)
    assert np.all(terms >= 0)
    assert np.all(terms <= math.log(11) + 2 / 0.2)


def test_temperature_scaling_invariance(rng):
    b = random_batch(rng, n=4, tau=0.5)
    scaled = ContrastiveBatch(b.Z * math.sqrt(3.0), b.domain_ids, 1.5)
    assert np.allclose(anchor_losses(b), anchor_losses(scaled), atol=1e-12)


def test_partition_brute_force(rng):
    Z = rng.standard_normal((6, 2))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    dom = np.array([0, 1, 1, 0, 1, 1])
    common = np.array([[0.0, 0.0], [0.1, 0.0], [2.0, 0.0], [0.05, 0.0], [0.0, 0.1], [2.0, 0.1]])
    b = ContrastiveBatch(Z, dom, 0.5)
    parts = partition_negatives(b, common, epsilon=0.5)
    for i, p in enumerate(parts):
        sums = {"a": 0.0, "b": 0.0, "g": 0.0}
        for k in range(6):
            if k == i:
                continue
            e = math.exp(float(Z[i] @ Z[k]) / 0.5)
            if dom[k] == dom[i]:
                sums["a"] += e
            elif np.linalg.norm(common[k] - common[i]) < 0.5:
                sums["b"] += e
            else:
                sums["g"] += e
        assert p.n_alpha == pytest.approx(sums["a"], rel=1e-12)
        assert p.n_beta == pytest.approx(sums["b"], rel=1e-12)
        assert p.n_gamma == pytest.approx(sums["g"], rel=1e-12)
        assert p.count_alpha + p.count_beta + p.count_gamma == 5


def test_partition_degenerate_cases(rng):
    b = random_batch(rng, n=4, n_domains=1)
    common = rng.standard_normal((8, 2))
    assert all(p.n_beta == 0 and p.n_gamma == 0 for p in partition_negatives(b, common))
    b2 = random_batch(rng, n=4, n_domains=3)
    assert all(p.n_gamma == 0 for p in partition_negatives(b2, common, epsilon=1e9))
    with pytest.raises(ValueError):
        partition_negatives(b2, None)


def test_default_epsilon():
    C = np.array([[0.0], [1.0], [3.0]])
    # pairwise distances 1, 2, 3 -> median 2
    assert default_epsilon(C) == 0.5


def test_suppression_perfect_and_identity(rng):
    c = rng.standard_normal((200, 2))
    d = rng.standard_normal((200, 1))
    s = suppression_metric(np.hstack([c, np.zeros((200, 1))]), c, d)
    assert s.common_energy == pytest.approx(1.0, abs=1e-9)
    assert s.domain_energy < 0.05
    both = suppression_metric(np.hstack([c, d]), c, d)
    assert both.common_energy == pytest.approx(1.0, abs=1e-9)
    assert both.domain_energy == pytest.approx(1.0, abs=1e-9)
    assert s.rank_deficient and not both.rank_deficient


def test_suppression_noise_is_near_zero():
    rng = np.random.default_rng(42)
    s = suppression_metric(rng.standard_normal((1000, 4)), rng.standard_normal((1000, 2)),
                           rng.standard_normal((1000, 1)))
    assert s.common_energy < 0.05 and s.domain_energy < 0.05
