"""Kernel independence measurement with the biased empirical HSIC.

All statistics are computed with float64 torch tensors so they can sit inside
a training loss; bandwidths are plain floats and never carry gradient.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .diffnum import DTYPE, check_finite


class BandwidthError(ValueError):
    pass


class SampleCountError(ValueError):
    pass


class PairingError(ValueError):
    pass


class PermutationCountError(ValueError):
    pass


def _as_samples(Y) -> torch.Tensor:
    t = Y if torch.is_tensor(Y) else torch.as_tensor(np.asarray(Y, dtype=np.float64))
    t = t.to(DTYPE)
    if t.dim() == 1:
        t = t.unsqueeze(1)
    if t.dim() != 2:
        raise ValueError(f"expected N x d samples, got shape {tuple(t.shape)}")
    return t


def sq_distances(Y: torch.Tensor) -> torch.Tensor:
    # column by column: exact zeros on the diagonal, and much faster than
    # reducing an N x N x d tensor over a short last axis
    out = None
    for c in range(Y.shape[1]):
        col = Y[:, c]
        diff = col.unsqueeze(1) - col.unsqueeze(0)
        out = diff * diff if out is None else out + diff * diff
    return out


@dataclass
class GramMatrix:
    K: torch.Tensor
    bandwidth: float

    @property
    def n(self) -> int:
        return self.K.shape[0]


def rbf_gram(Y, sigma: float) -> GramMatrix:
    """``K[p, q] = exp(-|y_p - y_q|^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise BandwidthError(f"bandwidth must be positive, got {sigma}")
    Y = _as_samples(Y)
    if Y.shape[0] < 2:
        raise SampleCountError("need at least two samples")
    K = torch.exp(-sq_distances(Y) / (2.0 * sigma * sigma))
    return GramMatrix(K, float(sigma))


def median_bandwidth(Y) -> float:
    """Median pairwise Euclidean distance, or 1.0 when every point coincides."""
    Y = _as_samples(Y).detach()
    N = Y.shape[0]
    if N < 2:
        raise SampleCountError("need at least two samples")
    iu = torch.triu_indices(N, N, offset=1)
    dist = sq_distances(Y)[iu[0], iu[1]].sqrt()
    # numpy's median averages the two middle values for even counts
    med = float(np.median(dist.numpy()))
    return med if med > 0 else 1.0


def center(K) -> torch.Tensor:
    """``H K H`` with ``H = I - 11^T / N``."""
    K = K.K if isinstance(K, GramMatrix) else torch.as_tensor(K, dtype=DTYPE)
    if K.dim() != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("center needs a square matrix")
    return K - K.mean(0, keepdim=True) - K.mean(1, keepdim=True) + K.mean()


def hsic_value(Yj, Yk, sigma_j: float, sigma_k: float) -> torch.Tensor:
    """Differentiable ``tr(K H L H) / N^2``."""
    Yj, Yk = _as_samples(Yj), _as_samples(Yk)
    if Yj.shape[0] != Yk.shape[0]:
        raise PairingError(f"sample counts differ: {Yj.shape[0]} vs {Yk.shape[0]}")
    N = Yj.shape[0]
    K = rbf_gram(Yj, sigma_j).K
    L = rbf_gram(Yk, sigma_k).K
    # tr(K H L H) = sum((H K H) * (H L H)) since H is symmetric idempotent;
    # centering both sides keeps the value exactly symmetric in (j, k)
    return check_finite((center(K) * center(L)).sum() / (N * N), "hsic")


@dataclass
class HsicEstimate:
    value: float
    pair: tuple[int, int]
    n: int
    bandwidths: tuple[float, float]


def hsic_biased(
    Yj,
    Yk,
    sigma_j: float | None = None,
    sigma_k: float | None = None,
    pair: tuple[int, int] = (0, 1),
) -> HsicEstimate:
    """Biased empirical HSIC; bandwidths default to the median heuristic."""
    Yj, Yk = _as_samples(Yj), _as_samples(Yk)
    sigma_j = median_bandwidth(Yj) if sigma_j is None else sigma_j
    sigma_k = median_bandwidth(Yk) if sigma_k is None else sigma_k
    with torch.no_grad():
        value = float(hsic_value(Yj, Yk, sigma_j, sigma_k))
    return HsicEstimate(value, pair, Yj.shape[0], (sigma_j, sigma_k))


def hsic_penalty(subspaces: Sequence[torch.Tensor], bandwidths: Sequence[float] | None = None) -> torch.Tensor:
    """Sum of HSIC over unordered subspace pairs ``j < k``.

    Bandwidths come from the median heuristic on the detached batch unless
    given explicitly.
    """
    subspaces = [_as_samples(Y) for Y in subspaces]
    if len({Y.shape[0] for Y in subspaces}) > 1:
        raise PairingError("subspaces have different sample counts")
    if bandwidths is None:
        bandwidths = [median_bandwidth(Y) for Y in subspaces]
    n = len(subspaces)
    if n < 2:
        ref = subspaces[0] if subspaces else torch.zeros(1, dtype=DTYPE)
        return ref.sum() * 0.0
    grams = [rbf_gram(Y, s).K for Y, s in zip(subspaces, bandwidths)]
    centered = [center(K) for K in grams]
    N = subspaces[0].shape[0]
    total = 0.0
    for j in range(n):
        for k in range(j + 1, n):
            total = total + (centered[j] * centered[k]).sum() / (N * N)
    return check_finite(total, "hsic penalty")


def pairwise_hsic(subspaces: Sequence, bandwidths: Sequence[float] | None = None) -> dict[tuple[int, int], float]:
    subspaces = [_as_samples(Y).detach() for Y in subspaces]
    if bandwidths is None:
        bandwidths = [median_bandwidth(Y) for Y in subspaces]
    out = {}
    for j in range(len(subspaces)):
        for k in range(j + 1, len(subspaces)):
            out[(j, k)] = hsic_biased(subspaces[j], subspaces[k], bandwidths[j], bandwidths[k], (j, k)).value
    return out


def permutation_pvalue(
    Yj,
    Yk,
    B: int = 99,
    rng: np.random.Generator | None = None,
    sigma_j: float | None = None,
    sigma_k: float | None = None,
) -> float:
    """Permutation p-value ``(1 + #{b: H_b >= H}) / (B + 1)``."""
    if B < 19:
        raise PermutationCountError("need at least 19 permutations")
    rng = rng if rng is not None else np.random.default_rng()
    Yj, Yk = _as_samples(Yj).detach(), _as_samples(Yk).detach()
    if Yj.shape[0] != Yk.shape[0]:
        raise PairingError(f"sample counts differ: {Yj.shape[0]} vs {Yk.shape[0]}")
    sigma_j = median_bandwidth(Yj) if sigma_j is None else sigma_j
    sigma_k = median_bandwidth(Yk) if sigma_k is None else sigma_k
    Kc = center(rbf_gram(Yj, sigma_j).K).numpy()
    L = center(rbf_gram(Yk, sigma_k).K).numpy()
    observed = float((Kc * L).sum())
    exceed = 0
    N = L.shape[0]
    for _ in range(B):
        perm = rng.permutation(N)
        if float((Kc * L[np.ix_(perm, perm)]).sum()) >= observed:
            exceed += 1
    return (1 + exceed) / (B + 1)
