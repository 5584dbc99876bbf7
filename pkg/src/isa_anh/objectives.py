"""NCE, HSIC-penalized NCE, APC and the combined ANH objective."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .diffnum import DTYPE, check_finite
from .encoder import ISAModel, predict_ahead, split_subspaces
from .hsic import hsic_penalty
from .synthgen import assign_auxiliary

LOSS_VARIANTS = ("paper_difference", "logistic")
OBJECTIVES = ("nce_hsic", "apc", "anh")


class PairingError(ValueError):
    pass


class FramingError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    objective: str = "nce_hsic"
    lambda_hsic: float = 0.02
    beta: float = 0.1
    tau: int = 1
    gamma: int = 30
    n: int = 4
    d: int = 2
    negatives_per_positive: int = 5
    loss_variant: str = "paper_difference"
    score_clip: float = 30.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    sequence_batch: int = 8
    epochs: int = 20
    max_steps: int = 0  # 0 means no cap beyond epochs
    checkpoint_every: int = 0
    backbone_layers: int = 2
    backbone_hidden: int = 0
    psi_layers: int = 4
    psi_width: int = 64
    dropout: float = 0.0
    record_wall_time: bool = False
    seed: int = 0

    def validate(self) -> TrainingConfig:
        problems = []
        if self.objective not in OBJECTIVES:
            problems.append(f"objective must be one of {OBJECTIVES}")
        if self.loss_variant not in LOSS_VARIANTS:
            problems.append(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.lambda_hsic < 0:
            problems.append("lambda_hsic must be >= 0")
        if self.beta < 0:
            problems.append("beta must be >= 0")
        if self.tau < 1:
            problems.append("tau must be >= 1")
        if self.gamma < 1:
            problems.append("gamma must be >= 1")
        if self.negatives_per_positive < 1:
            problems.append("negatives_per_positive must be >= 1")
        if self.n < 1 or self.d < 1:
            problems.append("n and d must be >= 1")
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if self.batch_size < 2 or self.sequence_batch < 1:
            problems.append("batch sizes too small")
        if self.epochs < 0 or self.max_steps < 0 or self.checkpoint_every < 0:
            problems.append("epochs, max_steps and checkpoint_every must be >= 0")
        if not 0 <= self.dropout < 1:
            problems.append("dropout must lie in [0, 1)")
        if self.score_clip <= 0:
            problems.append("score_clip must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# ---------------------------------------------------------------------------
# NCE


def nce_from_scores(pos: torch.Tensor, neg: torch.Tensor, variant: str = "paper_difference") -> torch.Tensor:
    """Loss from positive scores ``(N,)`` and negative scores ``(N, K)``."""
    if variant == "paper_difference":
        return neg.mean(1).mean() - pos.mean()
    if variant == "logistic":
        return F.softplus(neg).mean(1).mean() + F.softplus(-pos).mean()
    raise ValueError(f"unknown loss variant {variant!r}")


def _check_negatives(u_pos: torch.Tensor, u_neg: torch.Tensor) -> None:
    if u_neg.dim() != 2 or u_neg.shape[0] != u_pos.shape[0] or u_neg.shape[1] < 1:
        raise PairingError("negatives must have shape (N, K) with K >= 1")
    if bool((u_neg == u_pos.unsqueeze(1)).any()):
        raise PairingError("a negative auxiliary value equals its positive")


def nce_scores(model: ISAModel, y: torch.Tensor, u_pos, u_neg, score_clip: float | None = None):
    u_pos = torch.as_tensor(np.asarray(u_pos), dtype=torch.int64).reshape(-1)
    u_neg = torch.as_tensor(np.asarray(u_neg), dtype=torch.int64)
    _check_negatives(u_pos, u_neg)
    N, K = u_neg.shape
    pos = model.bank.score(y, u_pos)
    neg = model.bank.score(y.repeat_interleave(K, dim=0), u_neg.reshape(-1)).reshape(N, K)
    if score_clip is not None:
        pos = pos.clamp(-score_clip, score_clip)
        neg = neg.clamp(-score_clip, score_clip)
    return pos, neg


def nce_loss_from_hidden(
    model: ISAModel,
    y: torch.Tensor,
    u_pos,
    u_neg,
    variant: str = "paper_difference",
    score_clip: float | None = None,
) -> torch.Tensor:
    pos, neg = nce_scores(model, y, u_pos, u_neg, score_clip)
    return check_finite(nce_from_scores(pos, neg, variant), "nce loss")


def nce_loss(
    model: ISAModel,
    x,
    u_pos,
    u_neg,
    variant: str = "paper_difference",
    score_clip: float | None = None,
) -> torch.Tensor:
    """Noise-contrastive loss for feed-forward samples ``x`` (N x F)."""
    y = model.encoder.hidden_states(x)
    return nce_loss_from_hidden(model, y, u_pos, u_neg, variant, score_clip)


class NhTerms(NamedTuple):
    nce: torch.Tensor
    hsic: torch.Tensor


def nce_hsic_terms(
    model: ISAModel,
    y: torch.Tensor,
    u_pos,
    u_neg,
    variant: str = "paper_difference",
    score_clip: float | None = None,
    bandwidths: Sequence[float] | None = None,
) -> NhTerms:
    nce = nce_loss_from_hidden(model, y, u_pos, u_neg, variant, score_clip)
    penalty = hsic_penalty(split_subspaces(y, model.arch.n, model.arch.d), bandwidths)
    return NhTerms(nce, penalty)


def nce_hsic_loss(
    model: ISAModel,
    x,
    u_pos,
    u_neg,
    lam: float,
    variant: str = "paper_difference",
    score_clip: float | None = None,
    bandwidths: Sequence[float] | None = None,
) -> torch.Tensor:
    """``L_nh = nce + lam * sum_{j<k} HSIC(y_j, y_k)``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    y = model.encoder.hidden_states(x)
    terms = nce_hsic_terms(model, y, u_pos, u_neg, variant, score_clip, bandwidths)
    return terms.nce + lam * terms.hsic


# ---------------------------------------------------------------------------
# APC


def apc_loss(predictions, x, tau: int, per_frame: bool = False) -> torch.Tensor:
    """Summed L1 error between ``p_t`` and ``x_{t+tau}``.

    Batched inputs (``B x T x F``) are averaged over sequences.  With
    ``per_frame`` the sum is divided by the number of predicted frames.
    """
    predictions = torch.as_tensor(predictions, dtype=DTYPE)
    x = torch.as_tensor(x, dtype=DTYPE)
    if predictions.dim() != x.dim() or predictions.dim() not in (2, 3):
        raise FramingError("predictions and sequence must both be T x F or B x T x F")
    T = x.shape[-2]
    if predictions.shape[-2] != T - tau or predictions.shape[-1] != x.shape[-1]:
        raise FramingError(f"expected {T - tau} predictions of width {x.shape[-1]}, got {tuple(predictions.shape)}")
    err = (predictions - x[..., tau:, :]).abs().sum(dim=(-2, -1))
    if per_frame:
        err = err / (T - tau)
    return check_finite(err.mean(), "apc loss")


# ---------------------------------------------------------------------------
# ANH


class AnhTerms(NamedTuple):
    apc: torch.Tensor
    nce: torch.Tensor
    hsic: torch.Tensor

    def total(self, beta: float, lam: float) -> torch.Tensor:
        return self.apc + beta * (self.nce + lam * self.hsic)


def sequence_labels(batch_size: int, T: int, gamma: int) -> np.ndarray:
    """Segment labels for every frame of a ``B x T`` batch, flattened row-major."""
    return np.tile(assign_auxiliary(T, gamma), batch_size)


def anh_terms(
    model: ISAModel,
    sequences,
    config: TrainingConfig,
    u_neg,
    bandwidths: Sequence[float] | None = None,
) -> AnhTerms:
    """APC, NCE and HSIC terms for a ``B x T x F`` batch.

    The NCE/HSIC terms act on the recurrent hidden states of every frame,
    labelled by time segment; ``u_neg`` holds ``B*T x K`` negatives.
    """
    seq = torch.as_tensor(sequences, dtype=DTYPE)
    if seq.dim() == 2:
        seq = seq.unsqueeze(0)
    B, T, _ = seq.shape
    if T <= config.tau:
        raise FramingError(f"sequence length {T} must exceed tau={config.tau}")
    h = model.encoder.hidden_states(seq)
    preds = model.head(h[:, : T - config.tau])
    apc = apc_loss(preds, seq, config.tau)
    y = h.reshape(B * T, -1)
    u_pos = sequence_labels(B, T, config.gamma)
    clip = config.score_clip if config.loss_variant == "paper_difference" else None
    nh = nce_hsic_terms(model, y, u_pos, u_neg, config.loss_variant, clip, bandwidths)
    return AnhTerms(apc, nh.nce, nh.hsic)


def anh_loss(model: ISAModel, sequences, config: TrainingConfig, u_neg, bandwidths=None) -> torch.Tensor:
    """``L_anh = mean APC + beta * (nce + lambda * hsic)``."""
    terms = anh_terms(model, sequences, config, u_neg, bandwidths)
    return terms.total(config.beta, config.lambda_hsic)


def apc_only_loss(model: ISAModel, sequences, tau: int) -> torch.Tensor:
    seq = torch.as_tensor(sequences, dtype=DTYPE)
    return apc_loss(predict_ahead(model, seq, tau), seq, tau)
