"""Subspace encoder, per-subspace discriminators and the APC predictor head.

A model is one :class:`~isa_anh.diffnum.ParamStore` with three name prefixes:
``enc`` (backbone), ``psi<i>`` (discriminator ``i``) and ``head``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch

from .diffnum import (
    DTYPE,
    DimensionError,
    MLPSpec,
    ParamStore,
    RecurrentSpec,
    init_mlp,
    init_recurrent,
    make_generator,
    mlp_forward,
    recurrent_forward,
)


class SequenceTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    """Everything needed to rebuild a model around a stored ParamStore."""

    n: int
    d: int
    in_width: int
    aux_dim: int
    backbone: str = "feedforward"
    backbone_layers: int = 2
    backbone_hidden: int = 0  # 0 means n * d
    psi_layers: int = 4
    psi_width: int = 64
    dropout: float = 0.0
    tau: int = 1

    def __post_init__(self):
        if self.backbone not in ("feedforward", "recurrent"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if min(self.n, self.d, self.in_width, self.aux_dim, self.psi_layers, self.psi_width) < 1:
            raise DimensionError(f"invalid architecture {self}")
        if self.backbone_layers < 0 or (self.backbone == "recurrent" and self.backbone_layers < 1):
            raise DimensionError("invalid backbone depth")

    @property
    def width(self) -> int:
        return self.n * self.d

    @property
    def hidden(self) -> int:
        return self.backbone_hidden or self.width

    def backbone_spec(self) -> MLPSpec | RecurrentSpec:
        if self.backbone == "recurrent":
            return RecurrentSpec(self.in_width, self.width, self.backbone_layers)
        if self.backbone_layers == 0:
            if self.in_width != self.width:
                raise DimensionError("a depth-0 backbone needs input width n * d")
            return MLPSpec((self.in_width,))
        widths = (self.in_width,) + (self.hidden,) * (self.backbone_layers - 1) + (self.width,)
        return MLPSpec(widths)

    def psi_spec(self) -> MLPSpec:
        widths = (self.d + self.aux_dim,) + (self.psi_width,) * (self.psi_layers - 1) + (1,)
        return MLPSpec(widths, dropout=self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> Architecture:
        return cls(**doc)


class Encoded(NamedTuple):
    y: torch.Tensor
    subspaces: list[torch.Tensor]


def split_subspaces(y: torch.Tensor, n: int, d: int) -> list[torch.Tensor]:
    """Contiguous width-``d`` slices of the last axis."""
    if y.shape[-1] != n * d:
        raise DimensionError(f"width {y.shape[-1]} != n * d = {n * d}")
    return [y[..., i * d : (i + 1) * d] for i in range(n)]


def one_hot(u, p: int) -> torch.Tensor:
    """One-hot codes for 1-based integer labels."""
    u = torch.as_tensor(u, dtype=torch.int64)
    if u.numel() and (int(u.min()) < 1 or int(u.max()) > p):
        raise DimensionError(f"labels must lie in 1..{p}")
    return torch.nn.functional.one_hot(u - 1, p).to(DTYPE)


class SubspaceEncoder:
    def __init__(self, arch: Architecture, store: ParamStore):
        self.arch = arch
        self.store = store
        self.spec = arch.backbone_spec()

    @property
    def recurrent(self) -> bool:
        return self.arch.backbone == "recurrent"

    def hidden_states(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        if self.recurrent:
            return recurrent_forward(self.store, "enc", self.spec, x)
        return mlp_forward(self.store, "enc", self.spec, x)

    def __call__(self, x) -> Encoded:
        y = self.hidden_states(x)
        return Encoded(y, split_subspaces(y, self.arch.n, self.arch.d))


class DiscriminatorBank:
    """``psi_i(y_i, u)``: one independent network per subspace."""

    def __init__(self, arch: Architecture, store: ParamStore):
        self.arch = arch
        self.store = store
        self.spec = arch.psi_spec()
        # set by the trainer while training with dropout; None keeps the bank deterministic
        self.dropout_generator: torch.Generator | None = None

    def term(self, i: int, y_i: torch.Tensor, u_code: torch.Tensor) -> torch.Tensor:
        z = torch.cat([y_i, u_code], dim=-1)
        return mlp_forward(self.store, f"psi{i}", self.spec, z, self.dropout_generator).squeeze(-1)

    def terms(self, y: torch.Tensor, u) -> list[torch.Tensor]:
        u_code = one_hot(u, self.arch.aux_dim)
        subspaces = split_subspaces(y, self.arch.n, self.arch.d)
        return [self.term(i, y_i, u_code) for i, y_i in enumerate(subspaces)]

    def score(self, y: torch.Tensor, u) -> torch.Tensor:
        """``r = sum_i psi_i(y_i, u)`` per row of ``y``."""
        return torch.stack(self.terms(y, u)).sum(0)


class PredictorHead:
    def __init__(self, arch: Architecture, store: ParamStore):
        self.arch = arch
        self.store = store
        self.spec = MLPSpec((arch.width, arch.in_width))

    def __call__(self, h: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.store, "head", self.spec, h)


@dataclass
class ISAModel:
    arch: Architecture
    store: ParamStore
    encoder: SubspaceEncoder = field(init=False)
    bank: DiscriminatorBank = field(init=False)
    head: PredictorHead | None = field(init=False)

    def __post_init__(self):
        self.encoder = SubspaceEncoder(self.arch, self.store)
        self.bank = DiscriminatorBank(self.arch, self.store)
        self.head = PredictorHead(self.arch, self.store) if self.arch.backbone == "recurrent" else None

    def param_names(self, part: str) -> list[str]:
        prefix = {"encoder": "enc.", "bank": "psi", "head": "head."}[part]
        return self.store.names(prefix)


def build_model(arch: Architecture, seed: int = 0) -> ISAModel:
    gen = make_generator(seed)
    store = ParamStore()
    spec = arch.backbone_spec()
    if isinstance(spec, RecurrentSpec):
        init_recurrent(store, "enc", spec, gen)
        init_mlp(store, "head", MLPSpec((arch.width, arch.in_width)), gen)
    else:
        init_mlp(store, "enc", spec, gen)
    for i in range(arch.n):
        init_mlp(store, f"psi{i}", arch.psi_spec(), gen)
    return ISAModel(arch, store)


def encode(enc: SubspaceEncoder | ISAModel, x) -> Encoded:
    if isinstance(enc, ISAModel):
        enc = enc.encoder
    return enc(x)


def regression_score(model: ISAModel, x, u) -> torch.Tensor:
    y = model.encoder.hidden_states(x)
    return model.bank.score(y, u)


def predict_ahead(model: ISAModel, seq, tau: int | None = None) -> torch.Tensor:
    """Predictions ``p_t = head(h_t)`` for ``t = 1..T - tau`` (targets ``x_{t+tau}``)."""
    if model.head is None:
        raise ValueError("predict_ahead needs a recurrent backbone")
    tau = model.arch.tau if tau is None else tau
    seq = torch.as_tensor(seq, dtype=DTYPE)
    T = seq.shape[-2]
    if tau < 1 or T <= tau:
        raise SequenceTooShortError(f"need T > tau >= 1, got T={T}, tau={tau}")
    h = model.encoder.hidden_states(seq)
    return model.head(h[..., : T - tau, :])


def save_checkpoint(model: ISAModel, path) -> Path:
    """Write the ParamStore JSON to ``path`` and the architecture to ``<path>.arch.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.store.save(path)
    arch_path(path).write_text(json.dumps(model.arch.to_dict(), indent=2, sort_keys=True))
    return path


def arch_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".arch.json")


def load_checkpoint(path) -> ISAModel:
    arch = Architecture.from_dict(json.loads(arch_path(path).read_text()))
    return ISAModel(arch, ParamStore.load(path))
