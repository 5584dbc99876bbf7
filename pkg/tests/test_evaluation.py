import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isa_anh.evaluation import (
    ComparisonError,
    DegenerateInputError,
    ProbeError,
    RunSummary,
    ablation_compare,
    best_assignment,
    canonical_correlations,
    linear_probe,
    match_subspaces,
    pairwise_abs_pearson,
    pooled_probe,
)


def test_pearson_copy_is_one():
    y = np.random.default_rng(0).normal(size=(50, 1))
    assert pairwise_abs_pearson([y, y.copy()]) == pytest.approx(1.0, abs=1e-12)


def test_pearson_independent_small():
    rng = np.random.default_rng(1)
    blocks = [rng.normal(size=(10_000, 2)) for _ in range(2)]
    assert pairwise_abs_pearson(blocks) < 0.03


def test_pearson_hand_value():
    a = np.array([[1.0], [2.0], [3.0], [4.0]])
    b = np.array([[1.0], [3.0], [2.0], [4.0]])
    # corr = 0.8 by hand: centered dot 4 over norms sqrt(5)^2
    assert pairwise_abs_pearson([a, b]) == pytest.approx(0.8, abs=1e-12)


def test_pearson_drops_constant_dims():
    rng = np.random.default_rng(2)
    a = np.hstack([rng.normal(size=(20, 1)), np.ones((20, 1))])
    b = a[:, :1] * -2
    assert pairwise_abs_pearson([a, b]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DegenerateInputError):
        pairwise_abs_pearson([np.ones((20, 2)), b])
    with pytest.raises(DegenerateInputError):
        pairwise_abs_pearson([b[:2], b[:2]])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_pearson_range_and_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    blocks = [rng.normal(size=(30, 2)) @ rng.normal(size=(2, 2)) for _ in range(3)]
    base = pairwise_abs_pearson(blocks)
    assert 0.0 <= base <= 1.0
    scaled = [B * rng.uniform(0.1, 10, size=2) * rng.choice([-1, 1], size=2) + rng.normal(size=2) for B in blocks]
    assert pairwise_abs_pearson(scaled) == pytest.approx(base, abs=1e-10)


def test_canonical_correlations_identity_and_ridge():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(100, 2))
    rho, flagged = canonical_correlations(A, A @ rng.normal(size=(2, 2)))
    assert not flagged and np.allclose(rho, 1.0, atol=1e-10)
    rank1 = np.hstack([A[:, :1], 2 * A[:, :1]])
    _, flagged = canonical_correlations(rank1, A)
    assert flagged


def sources(N=2000, n=3, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(N, d)) for _ in range(n)]


def test_permuted_copy_recovers_permutation():
    S = sources()
    perm = (2, 0, 1)
    learned = [S[p] for p in perm]
    report = match_subspaces(learned, S)
    assert report.permutation == perm
    assert report.score == pytest.approx(1.0, abs=1e-12)
    assert not report.regularized


def test_linear_map_invariance():
    S = sources(seed=4)
    rng = np.random.default_rng(5)
    mapped = [B @ rng.normal(size=(2, 2)) + rng.normal(size=2) for B in S]
    assert match_subspaces(mapped, S).score == pytest.approx(1.0, abs=1e-6)


def test_fresh_noise_scores_low():
    S = sources(N=10_000, n=2, seed=6)
    noise = sources(N=10_000, n=2, seed=7)
    assert match_subspaces(noise, S).score < 0.25


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_score_invariances(seed):
    rng = np.random.default_rng(seed)
    S = [rng.normal(size=(80, 2)) for _ in range(2)]
    learned = [S[0] + 0.5 * rng.normal(size=(80, 2)), np.tanh(S[1]) + S[0] * 0.3]
    base = match_subspaces(learned, S).score
    assert 0.0 <= base <= 1.0
    mapped = [B @ (rng.normal(size=(2, 2)) + 3 * np.eye(2)) for B in learned]
    assert match_subspaces(mapped, S).score == pytest.approx(base, abs=1e-6)
    rows = rng.permutation(80)
    assert match_subspaces([B[rows] for B in learned], [B[rows] for B in S]).score == pytest.approx(base, abs=1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
@settings(max_examples=30, deadline=None)
def test_assignment_is_optimal(seed, n):
    A = np.random.default_rng(seed).uniform(size=(n, n))
    perm = best_assignment(A)
    assert sorted(perm) == list(range(n))
    best = max(sum(A[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    assert sum(A[i, perm[i]] for i in range(n)) == pytest.approx(best, abs=1e-12)


def test_large_n_uses_assignment_solver():
    rng = np.random.default_rng(8)
    n = 8
    true = rng.permutation(n)
    A = rng.uniform(0, 0.5, size=(n, n))
    A[np.arange(n), true] = 1.0
    assert best_assignment(A) == tuple(int(t) for t in true)


def test_match_rejects_mismatched_inputs():
    S = sources(N=50, n=2)
    with pytest.raises(ValueError):
        match_subspaces(S[:1], S)
    with pytest.raises(ValueError):
        match_subspaces([S[0], S[1][:, :1]], [S[0], S[1][:, :1] * 2])


def blobs(N=400, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=N)
    X = rng.normal(size=(N, 2)) * 0.3 + np.where(y[:, None] == 1, 3.0, -3.0)
    return X, y


def test_probe_separable_blobs():
    X, y = blobs()
    assert linear_probe(X, y, 2, seed=0) >= 0.99


def test_probe_one_hot_features():
    y = np.random.default_rng(1).integers(0, 4, size=200)
    assert linear_probe(np.eye(4)[y], y, 4) == 1.0


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(2)
    N, C = 2000, 4
    X = rng.normal(size=(N, 3))
    y = rng.integers(0, C, size=N)
    acc = linear_probe(X, y, C, seed=0)
    sigma = np.sqrt(0.25 * 0.75 / (0.2 * N))
    assert abs(acc - 1 / C) <= 3 * sigma


def test_probe_deterministic_and_errors():
    X, y = blobs(seed=3)
    assert linear_probe(X, y, seed=5) == linear_probe(X, y, seed=5)
    with pytest.raises(ProbeError):
        linear_probe(X, np.zeros(len(y)))
    with pytest.raises(ProbeError):
        linear_probe(X, y, classes=3)


def test_pooled_probe_examples():
    rng = np.random.default_rng(4)
    labels = np.repeat([0, 1], 10)
    seqs = [rng.normal(size=(20, 3)) * 1e-3 + (5.0 if c else -5.0) for c in labels]
    assert pooled_probe(seqs, labels) == 1.0
    same = [rng.normal(size=(20, 3)) for _ in range(400)]
    chance_labels = np.repeat([0, 1], 200)
    acc = pooled_probe(same, chance_labels, seed=1)
    assert abs(acc - 0.5) <= 3 * np.sqrt(0.25 / 80)


def test_pooled_probe_errors():
    with pytest.raises(ProbeError):
        pooled_probe([np.zeros((3, 2))] * 3, [0, 0, 1])
    with pytest.raises(DegenerateInputError):
        pooled_probe([np.full((3, 2), np.inf)] * 4, [0, 0, 1, 1])


def test_ablation_identical_and_paired():
    runs = [RunSummary(s, {"m": 0.1 * s}) for s in range(3)]
    res = ablation_compare(runs, runs, "m")
    assert res.mean_delta == 0.0 and len(res.per_seed) == 3
    other = [RunSummary(s, {"m": 0.1 * s + 0.5}) for s in range(3)]
    assert ablation_compare(runs, other, "m").mean_delta == pytest.approx(-0.5)
    assert "mean" in res.table()


def test_ablation_errors():
    a = [RunSummary(0, {"m": 1.0}), RunSummary(1, {"m": 1.0})]
    with pytest.raises(ComparisonError):
        ablation_compare(a, [RunSummary(0, {"m": 1.0}), RunSummary(2, {"m": 1.0})], "m")
    x = [RunSummary(0, {"m": 1.0}, {"lam": 0.0, "lr": 1.0})]
    y = [RunSummary(0, {"m": 1.0}, {"lam": 0.02, "lr": 2.0})]
    with pytest.raises(ComparisonError):
        ablation_compare(x, y, "m")
