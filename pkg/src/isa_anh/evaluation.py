"""Independence and identifiability measurements plus linear probes."""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)

CCA_RIDGE = 1e-6
LDA_RIDGE = 1e-3


class DegenerateInputError(ValueError):
    pass


class ProbeError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


def _blocks(subspaces) -> list[np.ndarray]:
    out = []
    for Y in subspaces:
        Y = np.asarray(Y.detach() if hasattr(Y, "detach") else Y, dtype=np.float64)
        out.append(Y[:, None] if Y.ndim == 1 else Y)
    return out


# ---------------------------------------------------------------------------
# independence


def pairwise_abs_pearson(subspaces: Sequence) -> float:
    """Mean over subspace pairs of the mean |corr| across all dimension pairs."""
    blocks = _blocks(subspaces)
    if len(blocks) < 2:
        raise DegenerateInputError("need at least two subspaces")
    N = blocks[0].shape[0]
    if N < 3 or any(B.shape[0] != N for B in blocks):
        raise DegenerateInputError("need N >= 3 samples in every subspace")
    kept = []
    for i, B in enumerate(blocks):
        keep = B.var(axis=0) > 1e-12
        if not keep.all():
            log.warning("subspace %d: dropping %d constant dimension(s)", i, int((~keep).sum()))
        if not keep.any():
            raise DegenerateInputError(f"subspace {i} has only constant dimensions")
        Z = B[:, keep] - B[:, keep].mean(axis=0)
        kept.append(Z / np.sqrt((Z * Z).sum(axis=0)))
    pair_means = [
        np.abs(kept[j].T @ kept[k]).mean() for j, k in itertools.combinations(range(len(kept)), 2)
    ]
    return float(np.clip(np.mean(pair_means), 0.0, 1.0))


# ---------------------------------------------------------------------------
# subspace matching


def canonical_correlations(A, B) -> tuple[np.ndarray, bool]:
    """Canonical correlations of two centered blocks; flag is True if a ridge was needed."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    Qa, Ra = np.linalg.qr(A)
    Qb, Rb = np.linalg.qr(B)

    def deficient(R):
        diag = np.abs(np.diag(R))
        return diag.size == 0 or diag.min() <= 1e-10 * max(diag.max(), 1e-300)

    if not (deficient(Ra) or deficient(Rb)):
        rho = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
        return np.clip(rho, 0.0, 1.0), False
    N = A.shape[0]
    Caa = A.T @ A / N + CCA_RIDGE * np.eye(A.shape[1])
    Cbb = B.T @ B / N + CCA_RIDGE * np.eye(B.shape[1])
    Cab = A.T @ B / N
    Wa = np.linalg.inv(np.linalg.cholesky(Caa))
    Wb = np.linalg.inv(np.linalg.cholesky(Cbb))
    rho = np.linalg.svd(Wa @ Cab @ Wb.T, compute_uv=False)
    return np.clip(rho, 0.0, 1.0), True


@dataclass
class MatchReport:
    permutation: tuple[int, ...]
    affinity: np.ndarray
    score: float
    baseline: float | None = None
    regularized: bool = False

    def to_dict(self) -> dict:
        return {
            "permutation": list(self.permutation),
            "affinity": self.affinity.tolist(),
            "score": self.score,
            "baseline": self.baseline,
            "regularized": self.regularized,
        }


def best_assignment(A: np.ndarray) -> tuple[int, ...]:
    """Permutation maximizing ``sum_i A[i, perm[i]]``."""
    n = A.shape[0]
    if n <= 6:
        best, best_val = None, -math.inf
        for perm in itertools.permutations(range(n)):
            val = sum(A[i, perm[i]] for i in range(n))
            if val > best_val:
                best, best_val = perm, val
        return tuple(best)
    rows, cols = linear_sum_assignment(A, maximize=True)
    return tuple(int(c) for _, c in sorted(zip(rows, cols)))


def match_subspaces(learned: Sequence, true_sources: Sequence) -> MatchReport:
    learned, true_sources = _blocks(learned), _blocks(true_sources)
    n = len(learned)
    if n != len(true_sources):
        raise ValueError("learned and true subspace counts differ")
    N = learned[0].shape[0]
    if any(B.shape[0] != N for B in learned + true_sources):
        raise ValueError("all blocks need the same number of samples")
    dims = {B.shape[1] for B in learned + true_sources}
    if len(dims) != 1:
        raise ValueError("unequal subspace dimensions are not supported")
    A = np.zeros((n, n))
    regularized = False
    for i in range(n):
        for j in range(n):
            rho, flag = canonical_correlations(learned[i], true_sources[j])
            A[i, j] = rho.mean()
            regularized |= flag
    perm = best_assignment(A)
    score = float(np.mean([A[i, perm[i]] for i in range(n)]))
    return MatchReport(perm, A, score, None, regularized)


# ---------------------------------------------------------------------------
# probes


def _split(labels: np.ndarray, seed: int, test_frac: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(labels.size)
    n_test = max(1, round(test_frac * labels.size))
    return perm[n_test:], perm[:n_test]


def _standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return [(X - mu) / sd for X in (train,) + others]


def fit_softmax_regression(
    X: np.ndarray, y: np.ndarray, classes: int, tol: float = 1e-5, max_steps: int = 5000
) -> np.ndarray:
    """Full-batch gradient descent on mean cross-entropy; returns ``(D+1) x C`` weights."""
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    Y = np.eye(classes)[y]
    lipschitz = 0.5 * np.linalg.eigvalsh(Xb.T @ Xb / Xb.shape[0]).max()
    lr = 1.0 / max(lipschitz, 1e-12)
    W = np.zeros((Xb.shape[1], classes))
    for _ in range(max_steps):
        logits = Xb @ W
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        grad = Xb.T @ (P - Y) / Xb.shape[0]
        if np.linalg.norm(grad) < tol:
            break
        W -= lr * grad
    return W


def linear_probe(features, labels, classes: int | None = None, seed: int = 0) -> float:
    """Held-out accuracy of a multinomial logistic regression (80/20 split)."""
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    values, y = np.unique(labels, return_inverse=True)
    C = classes if classes is not None else values.size
    if C < 2 or values.size < 2:
        raise ProbeError("need at least two classes")
    if values.size != C:
        raise ProbeError(f"expected {C} classes, found {values.size}")
    for attempt in range(2):
        train, test = _split(y, seed + attempt)
        if np.unique(y[train]).size == C:
            break
    else:
        raise ProbeError("a class is absent from the training split")
    Xtr, Xte = _standardize(X[train], X[test])
    W = fit_softmax_regression(Xtr, y[train], C)
    pred = (np.hstack([Xte, np.ones((Xte.shape[0], 1))]) @ W).argmax(axis=1)
    return float((pred == y[test]).mean())


def pooled_probe(sequences: Sequence, labels, seed: int = 0) -> float:
    """Mean-pool each sequence, classify with ridge-regularized LDA, return held-out accuracy."""
    pooled = np.array([np.asarray(S, dtype=np.float64).mean(axis=0) for S in sequences])
    if not np.all(np.isfinite(pooled)):
        raise DegenerateInputError("pooled features are not finite")
    labels = np.asarray(labels)
    values, y = np.unique(labels, return_inverse=True)
    counts = np.bincount(y)
    if values.size < 2 or counts.min() < 2:
        raise ProbeError("need at least two classes with two sequences each")
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(y.size, dtype=bool)
    for c in range(values.size):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_test = min(max(1, round(0.2 * idx.size)), idx.size - 1)
        test_mask[idx[:n_test]] = True
    Xtr, ytr = pooled[~test_mask], y[~test_mask]
    Xte, yte = pooled[test_mask], y[test_mask]
    means = np.array([Xtr[ytr == c].mean(axis=0) for c in range(values.size)])
    resid = Xtr - means[ytr]
    cov = resid.T @ resid / max(1, Xtr.shape[0] - values.size) + LDA_RIDGE * np.eye(Xtr.shape[1])
    if not np.all(np.isfinite(cov)) or np.linalg.cond(cov) > 1e12:
        raise DegenerateInputError("pooled covariance is singular")
    prec = np.linalg.inv(cov)
    priors = np.log(np.bincount(ytr, minlength=values.size) / ytr.size)
    scores = Xte @ prec @ means.T - 0.5 * np.einsum("kd,de,ke->k", means, prec, means) + priors
    return float((scores.argmax(axis=1) == yte).mean())


# ---------------------------------------------------------------------------
# ablations


@dataclass
class RunSummary:
    seed: int
    metrics: Mapping[str, float]
    config: Mapping[str, object] = field(default_factory=dict)


@dataclass
class AblationResult:
    metric: str
    mean_delta: float
    per_seed: list[tuple[int, float, float, float]]

    def table(self) -> str:
        lines = [f"{'seed':>6} {'a':>12} {'b':>12} {'a-b':>12}"]
        for seed, a, b, delta in self.per_seed:
            lines.append(f"{seed:>6} {a:>12.6f} {b:>12.6f} {delta:>12.6f}")
        lines.append(f"{'mean':>6} {'':>12} {'':>12} {self.mean_delta:>12.6f}")
        return "\n".join(lines)


def ablation_compare(runs_a: Sequence[RunSummary], runs_b: Sequence[RunSummary], metric: str) -> AblationResult:
    """Per-seed ``a - b`` deltas for runs paired by seed."""
    by_seed_a = {r.seed: r for r in runs_a}
    by_seed_b = {r.seed: r for r in runs_b}
    if len(by_seed_a) != len(runs_a) or set(by_seed_a) != set(by_seed_b) or not by_seed_a:
        raise ComparisonError("runs are not paired by seed")
    rows = []
    for seed in sorted(by_seed_a):
        ra, rb = by_seed_a[seed], by_seed_b[seed]
        if ra.config and rb.config:
            differing = {k for k in set(ra.config) | set(rb.config) if k != "seed" and ra.config.get(k) != rb.config.get(k)}
            if len(differing) > 1:
                raise ComparisonError(f"seed {seed}: configs differ in {sorted(differing)}")
        a, b = float(ra.metrics[metric]), float(rb.metrics[metric])
        rows.append((seed, a, b, a - b))
    return AblationResult(metric, float(np.mean([r[3] for r in rows])), rows)
