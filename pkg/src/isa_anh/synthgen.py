"""Ground-truth generator for nonlinear ISA problems.

Sources are conditionally Gaussian given a segment label ``u`` (sufficient
statistics ``(s, s*s)``), independent across the ``n`` blocks of width ``d``,
and observed through an invertible leaky-rectifier network.
"""

from __future__ import annotations

import itertools
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffnum import LEAKY_SLOPE, DimensionError

SIGMA2_MIN = 1e-4


class SpecError(ValueError):
    pass


class ArityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# conditional source distributions


@dataclass
class GaussianSegmentSpec:
    """Per-segment, per-source means and variances.

    ``means`` and ``variances`` have shape ``(segments, n, d)``; ``labels[k]``
    is the auxiliary value of row ``k``.
    """

    means: np.ndarray
    variances: np.ndarray
    labels: tuple[int, ...] = ()

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.ndim != 3 or self.means.shape != self.variances.shape:
            raise SpecError("means and variances must share shape (segments, n, d)")
        if not self.labels:
            self.labels = tuple(range(1, self.means.shape[0] + 1))
        self.labels = tuple(int(v) for v in self.labels)
        if len(self.labels) != self.means.shape[0] or len(set(self.labels)) != len(self.labels):
            raise SpecError("labels must be distinct, one per segment")
        if not np.all(np.isfinite(self.means)) or not np.all(np.isfinite(self.variances)):
            raise SpecError("non-finite segment parameters")
        if np.any(self.variances < SIGMA2_MIN):
            raise SpecError(f"variance below sigma_min^2 = {SIGMA2_MIN}")
        self._index = {lab: k for k, lab in enumerate(self.labels)}

    @property
    def num_segments(self) -> int:
        return self.means.shape[0]

    @property
    def n(self) -> int:
        return self.means.shape[1]

    @property
    def d(self) -> int:
        return self.means.shape[2]

    def index(self, labels) -> np.ndarray:
        try:
            return np.array([self._index[int(v)] for v in np.ravel(labels)], dtype=np.int64)
        except KeyError as exc:
            raise SpecError(f"unknown segment label {exc.args[0]}") from None

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "variances": self.variances.tolist(), "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, doc: dict) -> GaussianSegmentSpec:
        return cls(np.array(doc["means"]), np.array(doc["variances"]), tuple(doc["labels"]))


def random_segment_spec(
    n: int,
    d: int,
    segments: int,
    rng: np.random.Generator,
    mean_scale: float = 1.0,
    var_range: tuple[float, float] = (0.02, 5.0),
) -> GaussianSegmentSpec:
    """Independent draws per (segment, source): normal means, log-uniform variances."""
    lo, hi = var_range
    means = rng.normal(0.0, mean_scale, size=(segments, n, d))
    variances = np.exp(rng.uniform(math.log(lo), math.log(hi), size=(segments, n, d)))
    return GaussianSegmentSpec(means, variances)


def balanced_factors(total: int, parts: int) -> tuple[int, ...]:
    """Split ``total`` into ``parts`` integer factors, as equal as possible."""
    best = None
    divisors = [k for k in range(1, total + 1) if total % k == 0]
    for combo in itertools.product(divisors, repeat=parts - 1):
        rest, rem = divmod(total, math.prod(combo))
        if rem:
            continue
        factors = tuple(sorted(combo + (rest,)))
        if best is None or max(factors) - min(factors) < max(best) - min(best):
            best = factors
    if best is None:
        raise SpecError(f"cannot split {total} into {parts} factors")
    return best


def factorial_segment_spec(
    n: int,
    d: int,
    states: Sequence[int],
    rng: np.random.Generator,
    mean_scale: float = 1.0,
    var_range: tuple[float, float] = (0.02, 5.0),
) -> GaussianSegmentSpec:
    """Segments form the grid of per-source states.

    Source ``i`` has ``states[i]`` distinct (mean, variance) settings and every
    combination is one segment, so under uniform labels the sources are
    independent marginally as well as conditionally.
    """
    if len(states) != n or any(k < 1 for k in states):
        raise SpecError("need one positive state count per source")
    lo, hi = var_range
    per_source = [
        (
            rng.normal(0.0, mean_scale, size=(k, d)),
            np.exp(rng.uniform(math.log(lo), math.log(hi), size=(k, d))),
        )
        for k in states
    ]
    grid = list(itertools.product(*[range(k) for k in states]))
    means = np.array([[per_source[i][0][c[i]] for i in range(n)] for c in grid])
    variances = np.array([[per_source[i][1][c[i]] for i in range(n)] for c in grid])
    return GaussianSegmentSpec(means, variances)


class ConditionalSourceModel:
    """Exponential-family sources ``p_i(s_i|u) = exp(phi(s_i) . eta_i(u)) / Z_i(u)``."""

    n: int
    d: int
    m: int

    def phi(self, s_i: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eta(self, i: int, u) -> np.ndarray:
        raise NotImplementedError

    def log_normalizer(self, i: int, u) -> float:
        raise NotImplementedError

    def grad_phi(self, s_i: np.ndarray) -> np.ndarray:
        """Jacobian of the sufficient statistics, shape ``(m, d)``."""
        raise NotImplementedError

    def hess_phi_times(self, s_i: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Second derivative tensor ``(m, d, d)`` contracted with ``z`` on its last index."""
        raise NotImplementedError

    def log_density(self, s: np.ndarray, u) -> float:
        total = 0.0
        for i in range(self.n):
            s_i = s[i * self.d : (i + 1) * self.d]
            total += float(self.phi(s_i) @ self.eta(i, u)) - self.log_normalizer(i, u)
        return total


class GaussianSourceModel(ConditionalSourceModel):
    """Conditionally Gaussian instantiation with statistics ``(s, s*s)``."""

    def __init__(self, spec: GaussianSegmentSpec):
        self.spec = spec
        self.n, self.d = spec.n, spec.d
        self.m = 2 * spec.d

    def _params(self, i: int, u):
        k = self.spec.index([u])[0]
        return self.spec.means[k, i], self.spec.variances[k, i]

    def phi(self, s_i):
        s_i = np.asarray(s_i, dtype=np.float64)
        return np.concatenate([s_i, s_i * s_i])

    def eta(self, i, u):
        mu, var = self._params(i, u)
        return np.concatenate([mu / var, -0.5 / var])

    def log_normalizer(self, i, u):
        mu, var = self._params(i, u)
        return float(np.sum(mu * mu / (2 * var) + 0.5 * np.log(2 * np.pi * var)))

    def grad_phi(self, s_i):
        s_i = np.asarray(s_i, dtype=np.float64)
        return np.vstack([np.eye(self.d), 2 * np.diag(s_i)])

    def hess_phi_times(self, s_i, z):
        z = np.asarray(z, dtype=np.float64)
        return np.vstack([np.zeros((self.d, self.d)), 2 * np.diag(z)])


def sample_sources(spec: GaussianSegmentSpec, u_seq, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one source vector per label: returns ``(T x nd sources, labels)``."""
    labels = np.asarray(u_seq, dtype=np.int64).reshape(-1)
    k = spec.index(labels)
    noise = rng.standard_normal((labels.size, spec.n, spec.d))
    s = spec.means[k] + np.sqrt(spec.variances[k]) * noise
    return s.reshape(labels.size, spec.n * spec.d), labels


# ---------------------------------------------------------------------------
# mixing


def _leaky(z):
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _leaky_inv(z):
    return np.where(z > 0, z, z / LEAKY_SLOPE)


@dataclass
class MixingFunction:
    """``x = scale * (W_L . leaky(... leaky(W_1 s))) + shift``.

    The leaky rectifier follows every layer but the last.  ``scale`` and
    ``shift`` are a per-coordinate output normalization (identity by default).
    """

    weights: list[np.ndarray]
    dim: int
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None

    def __post_init__(self):
        if self.dim <= 0:
            raise DimensionError("mixing dimension must be positive")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        for W in self.weights:
            if W.shape != (self.dim, self.dim):
                raise DimensionError(f"mixing layer has shape {W.shape}, expected square {self.dim}")
        self.scale = np.ones(self.dim) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        self.shift = np.zeros(self.dim) if self.shift is None else np.asarray(self.shift, dtype=np.float64)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def condition_numbers(self) -> list[float]:
        return [float(np.linalg.cond(W)) for W in self.weights]

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "weights": [W.tolist() for W in self.weights],
            "scale": self.scale.tolist(),
            "shift": self.shift.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MixingFunction:
        return cls([np.array(W) for W in doc["weights"]], int(doc["dim"]), np.array(doc["scale"]), np.array(doc["shift"]))


def make_mixing(nd: int, depth: int, kappa_max: float, rng: np.random.Generator) -> MixingFunction:
    """Random invertible mixing; each layer's condition number is at most ``kappa_max``."""
    if nd <= 0:
        raise DimensionError("nd must be positive")
    if depth < 0 or kappa_max < 1:
        raise ValueError("need depth >= 0 and kappa_max >= 1")
    weights = []
    half = 0.5 * math.log(kappa_max)
    for _ in range(depth):
        U, _, Vt = np.linalg.svd(rng.standard_normal((nd, nd)))
        sv = np.exp(rng.uniform(-half, half, size=nd))
        weights.append(U @ np.diag(sv) @ Vt)
    return MixingFunction(weights, nd)


def apply_mixing(f: MixingFunction, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != f.dim:
        raise DimensionError(f"source width {s.shape[-1]} != mixing dimension {f.dim}")
    z = s
    for layer, W in enumerate(f.weights):
        z = z @ W.T
        if layer < f.depth - 1:
            z = _leaky(z)
    return z * f.scale + f.shift


def invert_mixing(f: MixingFunction, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != f.dim:
        raise DimensionError(f"observation width {x.shape[-1]} != mixing dimension {f.dim}")
    z = (x - f.shift) / f.scale
    for layer in reversed(range(f.depth)):
        if layer < f.depth - 1:
            z = _leaky_inv(z)
        z = np.linalg.solve(f.weights[layer], z.T).T
    return z


def standardize_output(f: MixingFunction, s: np.ndarray) -> MixingFunction:
    """Set the output normalization so that ``apply_mixing(f, s)`` is standardized."""
    raw = apply_mixing(MixingFunction(f.weights, f.dim), s)
    std = raw.std(axis=0)
    std[std == 0] = 1.0
    return MixingFunction(f.weights, f.dim, 1.0 / std, -raw.mean(axis=0) / std)


# ---------------------------------------------------------------------------
# auxiliary variables and separability


def assign_auxiliary(T: int, gamma: int) -> np.ndarray:
    """Segment labels for frames ``1..T``: frame ``t`` gets ``ceil(t / gamma)``."""
    if T < 1 or gamma < 1:
        raise ValueError("need T >= 1 and gamma >= 1")
    return np.arange(T, dtype=np.int64) // gamma + 1


@dataclass
class SeparabilityResult:
    separable: bool
    singular_values: np.ndarray
    matrix: np.ndarray = field(repr=False)


def separability_matrix(model: ConditionalSourceModel, s, z, u_list) -> np.ndarray:
    n, d = model.n, model.d
    s = np.asarray(s, dtype=np.float64).reshape(n * d)
    z = np.asarray(z, dtype=np.float64).reshape(d)
    rows = []
    u0 = u_list[0]
    blocks = []
    for i in range(n):
        s_i = s[i * d : (i + 1) * d]
        # (2d x m): first d rows grad_phi^T, next d rows (hess_phi x3 z)^T
        blocks.append(np.vstack([model.grad_phi(s_i).T, model.hess_phi_times(s_i, z).T]))
    for u_l in u_list[1:]:
        rows.append(np.concatenate([blocks[i] @ (model.eta(i, u_l) - model.eta(i, u0)) for i in range(n)]))
    return np.array(rows)


def check_separability(model: ConditionalSourceModel, s, z, u_list, tol: float = 1e-8) -> SeparabilityResult:
    """Numerical check of the span condition at one probe ``(s, z)``.

    ``u_list[0]`` is the reference value; the remaining ``2nd`` values give the
    rows of a ``2nd x 2nd`` matrix which must be well conditioned relative to
    ``tol``.
    """
    n, d = model.n, model.d
    u_list = list(u_list)
    if len(u_list) != 2 * n * d + 1:
        raise ArityError(f"need {2 * n * d + 1} auxiliary values, got {len(u_list)}")
    z = np.asarray(z, dtype=np.float64)
    if not np.any(z):
        raise ValueError("z must be nonzero")
    M = separability_matrix(model, s, z, u_list)
    sv = np.linalg.svd(M, compute_uv=False)
    separable = bool(sv[0] > 0 and sv[-1] > tol * sv[0])
    return SeparabilityResult(separable, sv, M)


def select_separating_labels(
    model: GaussianSourceModel,
    rng: np.random.Generator,
    tol: float = 1e-8,
) -> list[int] | None:
    """Greedily pick ``2nd + 1`` labels whose rows reach full rank at a random probe."""
    n, d = model.n, model.d
    labels = list(model.spec.labels)
    s = rng.standard_normal(n * d)
    z = rng.standard_normal(d)
    u0, chosen = labels[0], [labels[0]]
    rows = np.zeros((0, 2 * n * d))
    for lab in labels[1:]:
        row = separability_matrix(model, s, z, [u0, lab])
        trial = np.vstack([rows, row])
        sv = np.linalg.svd(trial, compute_uv=False)
        if sv[-1] > tol * sv[0]:
            rows = trial
            chosen.append(lab)
        if len(chosen) == 2 * n * d + 1:
            return chosen
    return None


# ---------------------------------------------------------------------------
# datasets


@dataclass
class LabeledSample:
    x: np.ndarray
    u: int
    s_true: np.ndarray | None = None
    seq: int | None = None


@dataclass
class SampleSet:
    """Array-of-samples view: ``x (N x F)``, labels ``u (N,)``, optional sources and sequence ids."""

    x: np.ndarray
    u: np.ndarray
    s: np.ndarray | None = None
    seq: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, k: int) -> LabeledSample:
        return LabeledSample(
            self.x[k],
            int(self.u[k]),
            None if self.s is None else self.s[k],
            None if self.seq is None else int(self.seq[k]),
        )

    def samples(self) -> Iterable[LabeledSample]:
        for k in range(len(self)):
            yield self[k]

    def sequences(self) -> list[SampleSet]:
        """Split into per-sequence sets (ordered by first appearance)."""
        if self.seq is None:
            return [self]
        order = list(dict.fromkeys(self.seq.tolist()))
        out = []
        for sid in order:
            mask = self.seq == sid
            out.append(
                SampleSet(self.x[mask], self.u[mask], None if self.s is None else self.s[mask], self.seq[mask])
            )
        return out


@dataclass
class SyntheticConfig:
    n: int = 2
    d: int = 2
    segments: int = 40
    samples: int = 20000
    mixing_depth: int = 2
    kappa_max: float = 10.0
    design: str = "factorial"
    mean_scale: float = 1.0
    var_low: float = 0.02
    var_high: float = 5.0
    standardize: bool = True
    seed: int = 0
    # sequence datasets only (sequences > 0)
    sequences: int = 0
    length: int = 0
    gamma: int = 30

    def validate(self) -> None:
        if self.n < 1 or self.d < 1:
            raise SpecError("n and d must be positive")
        if self.segments < 1 or self.samples < 1:
            raise SpecError("segments and samples must be positive")
        if self.design not in ("factorial", "iid"):
            raise SpecError(f"unknown design {self.design!r}")
        if self.var_low < SIGMA2_MIN or self.var_high < self.var_low:
            raise SpecError("variance range must satisfy sigma_min^2 <= low <= high")
        if self.sequences < 0 or (self.sequences and (self.length < 2 or self.gamma < 1)):
            raise SpecError("sequence datasets need length >= 2 and gamma >= 1")


@dataclass
class SyntheticProblem:
    config: SyntheticConfig
    spec: GaussianSegmentSpec
    mixing: MixingFunction
    data: SampleSet

    @property
    def model(self) -> GaussianSourceModel:
        return GaussianSourceModel(self.spec)


def _segment_spec(cfg: SyntheticConfig, segments: int, rng) -> GaussianSegmentSpec:
    var_range = (cfg.var_low, cfg.var_high)
    if cfg.design == "factorial":
        states = balanced_factors(segments, cfg.n)
        return factorial_segment_spec(cfg.n, cfg.d, states, rng, cfg.mean_scale, var_range)
    return random_segment_spec(cfg.n, cfg.d, segments, rng, cfg.mean_scale, var_range)


def make_problem(cfg: SyntheticConfig) -> SyntheticProblem:
    """Sample a full problem: segment spec, mixing, and observations.

    Flat datasets spread ``samples`` evenly over the segments.  Sequence
    datasets (``sequences > 0``) draw fresh segment parameters per sequence
    and label frame ``t`` with ``ceil(t / gamma)``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    nd = cfg.n * cfg.d
    mixing = make_mixing(nd, cfg.mixing_depth, cfg.kappa_max, rng)
    if cfg.sequences == 0:
        spec = _segment_spec(cfg, cfg.segments, rng)
        labels = np.array(spec.labels)[np.arange(cfg.samples) * spec.num_segments // cfg.samples]
        s, u = sample_sources(spec, labels, rng)
        seq = None
    else:
        labels_t = assign_auxiliary(cfg.length, cfg.gamma)
        per_seq = int(labels_t[-1])
        spec = None
        s_parts, u_parts, seq_parts = [], [], []
        for k in range(cfg.sequences):
            seg = _segment_spec(cfg, per_seq, rng)
            s_k, u_k = sample_sources(seg, labels_t, rng)
            s_parts.append(s_k)
            u_parts.append(u_k)
            seq_parts.append(np.full(cfg.length, k))
        s, u, seq = np.vstack(s_parts), np.concatenate(u_parts), np.concatenate(seq_parts)
    if cfg.standardize:
        mixing = standardize_output(mixing, s)
    x = apply_mixing(mixing, s)
    return SyntheticProblem(cfg, spec, mixing, SampleSet(x, u, s, seq))


def ar2_sequences(
    count: int,
    length: int,
    width: int,
    rng: np.random.Generator,
    coeffs: tuple[float, float] = (1.6, -0.9),
    noise: float = 0.1,
    burn_in: int = 50,
) -> np.ndarray:
    """Stationary order-2 autoregressive sequences, shape ``(count, length, width)``.

    Each feature follows ``x_t = a1 x_{t-1} + a2 x_{t-2} + noise * e_t``.
    """
    a1, a2 = coeffs
    total = length + burn_in
    x = np.zeros((count, total, width))
    e = rng.standard_normal((count, total, width)) * noise
    for t in range(2, total):
        x[:, t] = a1 * x[:, t - 1] + a2 * x[:, t - 2] + e[:, t]
    return x[:, burn_in:]


def write_dataset(path, data: SampleSet, metadata: dict | None = None) -> Path:
    """One JSON object per sample; metadata goes to ``<path>.meta.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for k in range(len(data)):
            rec = {"x": data.x[k].tolist(), "u": int(data.u[k])}
            if data.s is not None:
                rec["s"] = data.s[k].tolist()
            if data.seq is not None:
                rec["seq"] = int(data.seq[k])
            fh.write(json.dumps(rec) + "\n")
    if metadata is not None:
        meta_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True))
    return path


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_dataset(path) -> SampleSet:
    xs, us, ss, seqs = [], [], [], []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                xs.append(rec["x"])
                us.append(int(rec["u"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            if "s" in rec:
                ss.append(rec["s"])
            if "seq" in rec:
                seqs.append(int(rec["seq"]))
    if not xs:
        raise ValueError(f"{path}: empty dataset")
    s = np.array(ss, dtype=np.float64) if len(ss) == len(xs) else None
    seq = np.array(seqs, dtype=np.int64) if len(seqs) == len(xs) else None
    return SampleSet(np.array(xs, dtype=np.float64), np.array(us, dtype=np.int64), s, seq)


def problem_metadata(problem: SyntheticProblem) -> dict:
    return {
        "config": asdict(problem.config),
        "spec": None if problem.spec is None else problem.spec.to_dict(),
        "mixing": problem.mixing.to_dict(),
    }
