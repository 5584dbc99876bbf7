import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isa_anh.hsic import (
    BandwidthError,
    PairingError,
    PermutationCountError,
    SampleCountError,
    center,
    hsic_biased,
    hsic_penalty,
    hsic_value,
    median_bandwidth,
    pairwise_hsic,
    permutation_pvalue,
    rbf_gram,
)


def naive_hsic(Yj, Yk, sj, sk):
    """Independent oracle: explicit loops over tr(K H L H) / N^2."""
    N = len(Yj)
    K = [[math.exp(-sum((a - b) ** 2 for a, b in zip(Yj[p], Yj[q])) / (2 * sj * sj)) for q in range(N)] for p in range(N)]
    L = [[math.exp(-sum((a - b) ** 2 for a, b in zip(Yk[p], Yk[q])) / (2 * sk * sk)) for q in range(N)] for p in range(N)]
    H = [[(1.0 if p == q else 0.0) - 1.0 / N for q in range(N)] for p in range(N)]
    total = 0.0
    # tr(K H L H) = sum_{a,b,c,e} K[a,b] H[b,c] L[c,e] H[e,a]
    for a in range(N):
        for b in range(N):
            for c in range(N):
                kh = K[a][b] * H[b][c]
                for e in range(N):
                    total += kh * L[c][e] * H[e][a]
    return total / (N * N)


def test_gram_diagonal_and_plugin():
    Y = np.array([[0.0, 0.0], [1.0, 1.0]])  # distance sqrt(2)
    K = rbf_gram(Y, 1.0).K
    assert K[0, 0] == 1.0 and K[1, 1] == 1.0
    assert float(K[0, 1]) == pytest.approx(math.exp(-1), abs=1e-15)
    assert float(K[0, 1]) == pytest.approx(0.367879, abs=1e-6)


def test_gram_wide_bandwidth():
    Y = np.random.default_rng(0).normal(size=(5, 2))
    assert float(rbf_gram(Y, 1e8).K.min()) > 1 - 1e-12


def test_gram_bad_bandwidth():
    with pytest.raises(BandwidthError):
        rbf_gram(np.zeros((3, 1)), 0.0)


@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
@settings(max_examples=30, deadline=None)
def test_gram_properties(seed, N):
    Y = np.random.default_rng(seed).normal(size=(N, 2))
    K = rbf_gram(Y, 0.7).K.numpy()
    assert np.array_equal(K, K.T)
    assert np.all(K > 0) and np.all(K <= 1)
    assert np.linalg.eigvalsh(K).min() >= -1e-10


def test_median_bandwidth_examples():
    assert median_bandwidth(np.array([[0.0], [1.0], [3.0]])) == 2.0
    assert median_bandwidth(np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0
    assert median_bandwidth(np.ones((4, 2))) == 1.0
    with pytest.raises(SampleCountError):
        median_bandwidth(np.ones((1, 2)))


def test_center_examples():
    assert torch.equal(center(torch.ones(4, 4, dtype=torch.float64)), torch.zeros(4, 4, dtype=torch.float64))
    a = 0.3
    K = torch.tensor([[1, a], [a, 1]], dtype=torch.float64)
    expected = (1 - a) / 2 * torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=torch.float64)
    torch.testing.assert_close(center(K), expected, rtol=0, atol=1e-15)


@given(arrays(np.float64, (6, 6), elements=st.floats(-5, 5)))
def test_center_idempotent_and_zero_sums(K):
    K = torch.as_tensor(K)
    C = center(K)
    torch.testing.assert_close(center(C), C, rtol=0, atol=1e-12)
    assert float(C.sum(0).abs().max()) <= 1e-10
    assert float(C.sum(1).abs().max()) <= 1e-10


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_two_sample_closed_form(a, b):
    # distances chosen so that the off-diagonal Gram entries equal a and b
    if a <= 0 or b <= 0:
        a, b = max(a, 1e-300), max(b, 1e-300)
    dj = math.sqrt(-2 * math.log(a))
    dk = math.sqrt(-2 * math.log(b))
    est = hsic_biased(np.array([[0.0], [dj]]), np.array([[0.0], [dk]]), 1.0, 1.0)
    aa, bb = math.exp(-dj * dj / 2), math.exp(-dk * dk / 2)
    assert est.value == pytest.approx((1 - aa) * (1 - bb) / 4, abs=1e-12)


def test_constant_input_gives_zero():
    Yk = np.random.default_rng(0).normal(size=(10, 2))
    assert hsic_biased(np.ones((10, 2)), Yk).value == 0.0


def test_pairing_error():
    with pytest.raises(PairingError):
        hsic_biased(np.zeros((4, 1)), np.zeros((5, 1)))


def test_dependent_exceeds_independent():
    ratios = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        Y = rng.normal(size=(512, 2))
        Z = rng.normal(size=(512, 2))
        ratios.append(hsic_biased(Y, Y).value / hsic_biased(Y, Z).value)
    assert np.mean(ratios) > 10


@given(st.integers(0, 2**32 - 1), st.integers(2, 10))
@settings(max_examples=15, deadline=None)
def test_matches_naive_oracle(seed, N):
    rng = np.random.default_rng(seed)
    Yj, Yk = rng.normal(size=(N, 2)), rng.normal(size=(N, 3))
    sj, sk = rng.uniform(0.3, 3.0, size=2)
    est = hsic_biased(Yj, Yk, sj, sk)
    assert est.value == pytest.approx(naive_hsic(Yj.tolist(), Yk.tolist(), sj, sk), abs=1e-10)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_invariants(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, 30))
    Yj, Yk = rng.normal(size=(N, 2)), rng.normal(size=(N, 2)) + 0.5 * rng.normal(size=(N, 2))
    base = hsic_biased(Yj, Yk, 1.1, 0.8).value
    assert base >= -1e-12
    assert hsic_biased(Yk, Yj, 0.8, 1.1).value == base
    perm = rng.permutation(N)
    assert hsic_biased(Yj[perm], Yk[perm], 1.1, 0.8).value == pytest.approx(base, abs=1e-12)
    shifted = Yj + rng.normal(size=2) * 10
    assert hsic_biased(shifted, Yk, 1.1, 0.8).value == pytest.approx(base, abs=1e-12)


def test_hsic_value_differentiable():
    Y = torch.randn(8, 2, dtype=torch.float64, requires_grad=True)
    Z = torch.randn(8, 2, dtype=torch.float64)
    hsic_value(Y, Z, 1.0, 1.0).backward()
    assert Y.grad is not None and torch.isfinite(Y.grad).all()


def test_penalty_examples():
    rng = np.random.default_rng(0)
    A, B, C = (torch.as_tensor(rng.normal(size=(16, 2))) for _ in range(3))
    assert float(hsic_penalty([A])) == 0.0
    assert float(hsic_penalty([A, B])) == pytest.approx(hsic_biased(A, B).value, abs=1e-15)
    const = torch.ones(16, 2, dtype=torch.float64)
    assert float(hsic_penalty([A, const, C])) == pytest.approx(hsic_biased(A, C).value, abs=1e-15)


def test_penalty_bandwidth_is_detached():
    Y = torch.randn(10, 2, dtype=torch.float64, requires_grad=True)
    Z = torch.randn(10, 2, dtype=torch.float64)
    sj, sk = median_bandwidth(Y), median_bandwidth(Z)
    g1 = torch.autograd.grad(hsic_penalty([Y, Z]), Y)[0]
    g2 = torch.autograd.grad(hsic_penalty([Y, Z], [sj, sk]), Y)[0]
    assert torch.equal(g1, g2)


def test_pairwise_keys():
    rng = np.random.default_rng(1)
    out = pairwise_hsic([rng.normal(size=(10, 1)) for _ in range(3)])
    assert sorted(out) == [(0, 1), (0, 2), (1, 2)]


def test_permutation_dependent():
    Y = np.random.default_rng(0).normal(size=(256, 2))
    assert permutation_pvalue(Y, Y, 99, np.random.default_rng(1)) == 0.01


def test_permutation_small_and_errors():
    p = permutation_pvalue(np.array([[0.0], [1.0]]), np.array([[0.0], [2.0]]), 19, np.random.default_rng(0))
    assert 0 < p <= 1
    with pytest.raises(PermutationCountError):
        permutation_pvalue(np.zeros((4, 1)), np.zeros((4, 1)), 10)
