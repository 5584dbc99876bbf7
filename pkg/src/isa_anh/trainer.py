"""Training loop: negative sampling, mini-batching, Adam, checkpoints and run logs."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffnum
from .diffnum import (
    DTYPE,
    NonFiniteError,
    ParamStore,
    adam_step,
    backward,
    finite_diff_errors,
    leaky_relu,
)
from .encoder import (
    Architecture,
    ISAModel,
    build_model,
    one_hot,
    save_checkpoint,
    split_subspaces,
)
from .hsic import hsic_penalty, median_bandwidth
from .objectives import (
    ConfigError,
    TrainingConfig,
    anh_terms,
    apc_loss,
    nce_hsic_terms,
    nce_loss_from_hidden,
    sequence_labels,
)
from .synthgen import SampleSet, assign_auxiliary

log = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4


class NoNegativesError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: Path | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


class AuditFailure(AssertionError):
    pass


# ---------------------------------------------------------------------------
# negatives


def make_pairs(u_batch, negatives_per_positive: int, rng: np.random.Generator) -> np.ndarray:
    """Negative labels ``(N, K)``: uniform over the batch's distinct labels, never the positive."""
    u = np.asarray(u_batch, dtype=np.int64).reshape(-1)
    distinct = np.unique(u)
    if distinct.size < 2:
        raise NoNegativesError("batch has a single distinct auxiliary value")
    own = np.searchsorted(distinct, u)
    r = rng.integers(0, distinct.size - 1, size=(u.size, negatives_per_positive))
    r += r >= own[:, None]
    return distinct[r]


# ---------------------------------------------------------------------------
# run log


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def append(self, step: int, total: float, apc: float, nce: float, hsic: float, wall_ms: float) -> dict:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("run log steps must increase")
        rec = {"step": step, "loss_total": total, "loss_apc": apc, "loss_nce": nce, "loss_hsic": hsic, "wall_ms": wall_ms}
        self.records.append(rec)
        return rec

    def losses(self) -> np.ndarray:
        return np.array([r["loss_total"] for r in self.records])

    def to_jsonl(self) -> str:
        lines = [json.dumps(r) for r in self.records]
        if self.final:
            lines.append(json.dumps({"final": self.final}))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> RunLog:
        out = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            if "final" in rec:
                out.final = rec["final"]
            else:
                out.records.append(rec)
        return out


# ---------------------------------------------------------------------------
# data plumbing


def architecture_for(config: TrainingConfig, data: SampleSet | np.ndarray) -> Architecture:
    if config.objective == "nce_hsic":
        x = data.x
        return Architecture(
            n=config.n,
            d=config.d,
            in_width=x.shape[1],
            aux_dim=int(np.max(data.u)),
            backbone="feedforward",
            backbone_layers=config.backbone_layers,
            backbone_hidden=config.backbone_hidden,
            psi_layers=config.psi_layers,
            psi_width=config.psi_width,
            dropout=config.dropout,
            tau=config.tau,
        )
    seqs = as_sequences(data)
    return Architecture(
        n=config.n,
        d=config.d,
        in_width=seqs.shape[2],
        aux_dim=int(assign_auxiliary(seqs.shape[1], config.gamma)[-1]),
        backbone="recurrent",
        backbone_layers=max(1, config.backbone_layers),
        psi_layers=config.psi_layers,
        psi_width=config.psi_width,
        dropout=config.dropout,
        tau=config.tau,
    )


def as_sequences(data) -> np.ndarray:
    """``B x T x F`` array from an array or a SampleSet with sequence ids."""
    if isinstance(data, SampleSet):
        parts = [s.x for s in data.sequences()]
        if len({p.shape[0] for p in parts}) != 1:
            raise ValueError("all sequences must have the same length")
        return np.stack(parts)
    arr = np.asarray(data, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


@dataclass
class TrainResult:
    model: ISAModel
    log: RunLog
    checkpoints: list[Path] = field(default_factory=list)


class _Step:
    """Loss evaluation for one mini-batch; returns (total, apc, nce, hsic)."""

    def __init__(self, model: ISAModel, config: TrainingConfig):
        self.model = model
        self.config = config
        self.clip = config.score_clip if config.loss_variant == "paper_difference" else None

    def flat(self, x: np.ndarray, u: np.ndarray, negatives: np.ndarray):
        cfg = self.config
        y = self.model.encoder.hidden_states(torch.as_tensor(x, dtype=DTYPE))
        nce, pen = nce_hsic_terms(self.model, y, u, negatives, cfg.loss_variant, self.clip)
        total = nce + cfg.lambda_hsic * pen
        zero = torch.zeros((), dtype=DTYPE)
        return total, zero, nce, pen

    def sequences(self, seqs: np.ndarray, negatives: np.ndarray | None):
        cfg = self.config
        if cfg.objective == "apc":
            seq = torch.as_tensor(seqs, dtype=DTYPE)
            T = seq.shape[1]
            h = self.model.encoder.hidden_states(seq)
            apc = apc_loss(self.model.head(h[:, : T - cfg.tau]), seq, cfg.tau)
            zero = torch.zeros((), dtype=DTYPE)
            return apc, apc, zero, zero
        terms = anh_terms(self.model, seqs, cfg, negatives)
        return terms.total(cfg.beta, cfg.lambda_hsic), terms.apc, terms.nce, terms.hsic


def _batches(rng: np.random.Generator, total: int, size: int):
    order = rng.permutation(total)
    for start in range(0, total, size):
        idx = order[start : start + size]
        if idx.size >= 2 or total < 2:
            yield idx


def train(
    config: TrainingConfig,
    data: SampleSet | np.ndarray,
    out_dir: str | Path | None = None,
    model: ISAModel | None = None,
    log_path: str | Path | None = None,
    callback: Callable[[int, ISAModel], None] | None = None,
) -> TrainResult:
    """Optimize the configured objective with Adam over shuffled mini-batches.

    Runs ``epochs`` passes (capped at ``max_steps`` optimizer steps when that
    is nonzero).  Checkpoints go to ``out_dir/checkpoints`` every
    ``checkpoint_every`` steps and at the end.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = build_model(architecture_for(config, data), seed=config.seed)
    if config.dropout > 0:
        model.bank.dropout_generator = diffnum.make_generator(config.seed + 1)
    step_fn = _Step(model, config)
    runlog = RunLog()
    checkpoints: list[Path] = []
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None

    def checkpoint(step: int) -> None:
        if ckpt_dir is None:
            return
        # never let a corrupted state replace the last good checkpoint
        if not all(bool(torch.isfinite(p).all()) for p in model.store.params.values()):
            abort(step + 1)
        checkpoints.append(save_checkpoint(model, ckpt_dir / f"step-{step:06d}.json"))

    def abort(at_step: int) -> None:
        runlog.final = {"aborted_at": at_step}
        if log_path is not None:
            runlog.write(log_path)
        raise TrainingDiverged(at_step, checkpoints[-1] if checkpoints else None)

    sequential = config.objective != "nce_hsic"
    if sequential:
        seqs = as_sequences(data)
        B, T, _ = seqs.shape
        if T <= config.tau:
            raise ConfigError(f"sequence length {T} must exceed tau={config.tau}")
        frame_labels = assign_auxiliary(T, config.gamma)
        n_items, batch = B, config.sequence_batch
    else:
        if len(data) < 2:
            raise ConfigError("dataset needs at least two samples")
        n_items, batch = len(data), config.batch_size

    step = 0
    t0 = time.perf_counter()
    done = config.max_steps > 0 and step >= config.max_steps
    for _epoch in range(config.epochs):
        if done:
            break
        for idx in _batches(rng, n_items, batch):
            try:
                if sequential:
                    negs = None
                    if config.objective == "anh":
                        negs = make_pairs(np.tile(frame_labels, idx.size), config.negatives_per_positive, rng)
                    total, apc, nce, pen = step_fn.sequences(seqs[idx], negs)
                else:
                    negs = make_pairs(data.u[idx], config.negatives_per_positive, rng)
                    total, apc, nce, pen = step_fn.flat(data.x[idx], data.u[idx], negs)
            except NoNegativesError:
                log.warning("skipping batch with a single distinct auxiliary value")
                continue
            except NonFiniteError:
                total = torch.tensor(float("nan"), dtype=DTYPE)
            if not bool(torch.isfinite(total)):
                abort(step + 1)
            model.store.zero_grad()
            backward(total)
            adam_step(model.store, config.lr, (config.beta1, config.beta2), config.eps)
            step += 1
            wall = (time.perf_counter() - t0) * 1000 if config.record_wall_time else 0.0
            runlog.append(step, *(float(v.detach()) for v in (total, apc, nce, pen)), wall)
            if callback is not None:
                callback(step, model)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                checkpoint(step)
            if config.max_steps and step >= config.max_steps:
                done = True
                break
    model.bank.dropout_generator = None
    if not checkpoints or not checkpoints[-1].name.endswith(f"{step:06d}.json"):
        checkpoint(step)
    runlog.final = {"steps": step}
    if log_path is not None:
        runlog.write(log_path)
    return TrainResult(model, runlog, checkpoints)


# ---------------------------------------------------------------------------
# gradient audit


@dataclass
class AuditReport:
    errors: dict[str, float]
    offenders: dict[str, list[str]] = field(default_factory=dict)
    tolerance: float = GRAD_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def to_dict(self) -> dict:
        return {"errors": self.errors, "offenders": self.offenders, "tolerance": self.tolerance, "passed": self.passed}


@dataclass
class TinyFixture:
    """One sequence of eight frames with ``n = d = 2``.

    An odd number of predicted frames keeps the L1 head-bias gradient away
    from an exact tie of residual signs.
    """

    sequences: np.ndarray
    config: TrainingConfig
    model: ISAModel
    negatives: np.ndarray


def tiny_fixture(seed: int = 0, loss_variant: str = "paper_difference") -> TinyFixture:
    rng = np.random.default_rng(seed)
    config = TrainingConfig(
        objective="anh", n=2, d=2, tau=1, gamma=2, negatives_per_positive=3,
        psi_layers=4, psi_width=6, backbone_layers=1, loss_variant=loss_variant, seed=seed,
    )
    seqs = rng.standard_normal((1, 8, 3))
    model = build_model(architecture_for(config, seqs), seed=seed)
    # move biases off zero so every parameter matters
    with torch.no_grad():
        for name, p in model.store.params.items():
            if ".b" in name:
                p.add_(torch.as_tensor(rng.normal(0, 0.1, p.shape), dtype=DTYPE))
    labels = sequence_labels(1, 8, config.gamma)
    negatives = make_pairs(labels, config.negatives_per_positive, rng)
    _place_kinks(model, seqs, labels, negatives)
    return TinyFixture(seqs, config, model, negatives)


def _place_kinks(model: ISAModel, seqs: np.ndarray, labels: np.ndarray, negatives: np.ndarray) -> None:
    """Re-bias hidden discriminator units so each one separates positives from negatives.

    Under piecewise-linear units the bias gradient of the difference loss is a
    count of positive versus negative inputs above the kink.  When that count
    is zero the gradient vanishes exactly and a relative finite-difference
    error compares rounding noise, so each kink goes where the count is largest.
    """
    arch = model.arch
    K = negatives.shape[1]
    with torch.no_grad():
        y = model.encoder.hidden_states(torch.as_tensor(seqs, dtype=DTYPE)).reshape(len(labels), -1)
        us = np.concatenate([labels, negatives.reshape(-1)])
        rows = np.concatenate([np.arange(len(labels)), np.repeat(np.arange(len(labels)), K)])
        weight = torch.as_tensor(np.concatenate([-np.ones(len(labels)), np.full(negatives.size, 1.0 / K)]), dtype=DTYPE)
        code = one_hot(us, arch.aux_dim)
        for i, y_i in enumerate(split_subspaces(y, arch.n, arch.d)):
            z = torch.cat([y_i[rows], code], dim=-1)
            for layer in range(arch.psi_layers - 1):
                b = model.store[f"psi{i}.b{layer}"]
                pre = z @ model.store[f"psi{i}.W{layer}"].T + b
                shift = torch.stack([_best_kink(pre[:, j], weight) for j in range(pre.shape[1])])
                b.sub_(shift)
                z = leaky_relu(pre - shift)


def _best_kink(values: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    order = torch.argsort(values)
    v, w = values[order], weight[order]
    # weight of inputs strictly above each gap between consecutive sorted values
    above = w.sum() - torch.cumsum(w, 0)[:-1]
    gap = v[1:] - v[:-1]
    score = above.abs() * (gap > 1e-3)
    k = int(torch.argmax(score + 1e-9 * gap))
    return (v[k] + v[k + 1]) / 2


def output_biases(model: ISAModel) -> list[str]:
    last = model.arch.psi_layers - 1
    return [f"psi{i}.b{last}" for i in range(model.arch.n)]


def gradient_audit(fixture: TinyFixture | None = None, samples: int = 40, h: float = 1e-5, seed: int = 0) -> AuditReport:
    """Finite-difference check of every loss component and the fused ANH loss."""
    fx = fixture if fixture is not None else tiny_fixture(seed)
    model, cfg = fx.model, fx.config
    seq = torch.as_tensor(fx.sequences, dtype=DTYPE)
    B, T, _ = seq.shape
    labels = sequence_labels(B, T, cfg.gamma)
    with torch.no_grad():
        y0 = model.encoder.hidden_states(seq).reshape(B * T, -1)
    bandwidths = [median_bandwidth(Y) for Y in split_subspaces(y0, cfg.n, cfg.d)]
    enc = model.param_names("encoder")
    bank = model.param_names("bank")
    head = model.param_names("head")

    def hidden(store: ParamStore):
        return model.encoder.hidden_states(seq)

    def apc(store):
        h_ = hidden(store)
        return apc_loss(model.head(h_[:, : T - cfg.tau]), seq, cfg.tau)

    def nce(variant):
        def fn(store):
            y = hidden(store).reshape(B * T, -1)
            return nce_loss_from_hidden(model, y, labels, fx.negatives, variant, None)
        return fn

    def hsic(store):
        y = hidden(store).reshape(B * T, -1)
        return hsic_penalty(split_subspaces(y, cfg.n, cfg.d), bandwidths)

    def fused(store):
        return anh_terms(model, seq, cfg, fx.negatives, bandwidths).total(cfg.beta, cfg.lambda_hsic)

    # the difference loss cannot see a constant added to every score, so the
    # output biases of the discriminators carry no gradient under it
    blind = set(output_biases(model))
    shifted_bank = [name for name in bank if name not in blind]
    fused_bank = shifted_bank if cfg.loss_variant == "paper_difference" else bank

    checks = {
        "apc_loss": (apc, enc + head),
        "nce_loss[paper_difference]": (nce("paper_difference"), enc + shifted_bank),
        "nce_loss[logistic]": (nce("logistic"), enc + bank),
        "hsic_penalty": (hsic, enc),
        "anh_loss": (fused, enc + fused_bank + head),
    }
    errors, offenders = {}, {}
    for k, (name, (fn, names)) in enumerate(checks.items()):
        probes = finite_diff_errors(fn, model.store, h=h, samples=samples, rng=np.random.default_rng(seed + k), names=names)
        errors[name] = max(p.rel_error for p in probes)
        bad = sorted({f"{p.name}[{p.index}]" for p in probes if p.rel_error > GRAD_TOLERANCE})
        if bad:
            offenders[name] = bad
    return AuditReport(errors, offenders)


def require_audit(report: AuditReport) -> AuditReport:
    if not report.passed:
        raise AuditFailure(f"gradient audit failed: {report.offenders}")
    return report
