"""Small differentiable-numerics core.

Arrays are float64 ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd.  Everything a training loop touches directly (parameter
storage, network definitions, the optimizer and the finite-difference
checker) lives here so the rest of the package never builds ``nn.Module``
objects.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
LEAKY_SLOPE = 0.2
STORE_FORMAT_VERSION = 1


class DimensionError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class OptimizerError(FloatingPointError):
    pass


class CheckInvalidError(RuntimeError):
    pass


def as_grid(data, name: str = "input") -> torch.Tensor:
    """Convert array-like data to a finite float64 tensor."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64) if not torch.is_tensor(data) else data)
    t = t.to(DTYPE)
    check_finite(t, name)
    return t


def check_finite(t: torch.Tensor, name: str = "value") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite entries in {name}")
    return t


def leaky_relu(z: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(z, LEAKY_SLOPE)


def glorot_uniform(fan_in: int, fan_out: int, generator: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(fan_out, fan_in, generator=generator, dtype=DTYPE) * 2 - 1) * bound


class ParamStore:
    """Named parameters with one gradient buffer each and Adam state."""

    def __init__(self):
        self.params: dict[str, torch.Tensor] = {}
        self.step = 0
        self._m: dict[str, torch.Tensor] = {}
        self._v: dict[str, torch.Tensor] = {}

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = torch.as_tensor(value, dtype=DTYPE).clone().detach()
        check_finite(t, name)
        t.requires_grad_(True)
        t.grad = torch.zeros_like(t)
        self.params[name] = t
        self._m[name] = torch.zeros_like(t)
        self._v[name] = torch.zeros_like(t)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    def grad(self, name: str) -> torch.Tensor:
        p = self.params[name]
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        return p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            else:
                p.grad.zero_()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def merge(self, other: ParamStore) -> ParamStore:
        """Adopt the parameters of ``other`` (shared tensors, not copies)."""
        for name, p in other.params.items():
            if name in self.params:
                raise KeyError(f"parameter {name!r} already exists")
            self.params[name] = p
            self._m[name] = other._m[name]
            self._v[name] = other._v[name]
        return self

    def copy(self) -> ParamStore:
        out = ParamStore()
        for name, p in self.params.items():
            out.add(name, p.detach())
        out.step = self.step
        return out

    def state_equal(self, other: ParamStore) -> bool:
        if list(self.params) != list(other.params):
            return False
        return all(torch.equal(self.params[k].detach(), other.params[k].detach()) for k in self.params)

    def to_dict(self) -> dict:
        return {
            "version": STORE_FORMAT_VERSION,
            "step": self.step,
            "params": {
                name: {"shape": list(p.shape), "values": p.detach().reshape(-1).tolist()}
                for name, p in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ParamStore:
        if doc.get("version") != STORE_FORMAT_VERSION:
            raise ValueError(f"unsupported parameter store version {doc.get('version')!r}")
        store = cls()
        for name, entry in doc["params"].items():
            shape = [int(s) for s in entry["shape"]]
            values = torch.tensor(entry["values"], dtype=DTYPE)
            if values.numel() != math.prod(shape):
                raise DimensionError(f"{name}: {values.numel()} values for shape {shape}")
            store.add(name, values.reshape(shape))
        store.step = int(doc.get("step", 0))
        return store

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> ParamStore:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# feed-forward networks


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths ``(in, hidden..., out)``; a single width means identity."""

    widths: tuple[int, ...]
    final_activation: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.widths) < 1 or any(w <= 0 for w in self.widths):
            raise DimensionError(f"invalid widths {self.widths}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


def init_mlp(store: ParamStore, prefix: str, spec: MLPSpec, generator: torch.Generator) -> None:
    for layer, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        store.add(f"{prefix}.W{layer}", glorot_uniform(fan_in, fan_out, generator))
        store.add(f"{prefix}.b{layer}", torch.zeros(fan_out, dtype=DTYPE))


def mlp_forward(
    store: ParamStore,
    prefix: str,
    spec: MLPSpec,
    x: torch.Tensor,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Affine + leaky-rectifier stack.  Dropout runs only when a generator is given."""
    if x.shape[-1] != spec.in_width:
        raise DimensionError(f"{prefix}: input width {x.shape[-1]} != {spec.in_width}")
    z = x
    for layer in range(spec.depth):
        W = store[f"{prefix}.W{layer}"]
        b = store[f"{prefix}.b{layer}"]
        if W.shape != (spec.widths[layer + 1], spec.widths[layer]):
            raise DimensionError(f"{prefix}.W{layer} has shape {tuple(W.shape)}")
        z = z @ W.T + b
        last = layer == spec.depth - 1
        if not last or spec.final_activation:
            z = leaky_relu(z)
            if spec.dropout > 0 and generator is not None and not last:
                keep = (torch.rand(z.shape, generator=generator, dtype=DTYPE) >= spec.dropout).to(DTYPE)
                z = z * keep / (1 - spec.dropout)
    return check_finite(z, f"{prefix} output")


# ---------------------------------------------------------------------------
# recurrent networks (gated recurrent unit)


@dataclass(frozen=True)
class RecurrentSpec:
    in_width: int
    hidden_width: int
    layers: int = 1

    def __post_init__(self):
        if self.in_width <= 0 or self.hidden_width <= 0 or self.layers <= 0:
            raise DimensionError(f"invalid recurrent spec {self}")


def init_recurrent(store: ParamStore, prefix: str, spec: RecurrentSpec, generator: torch.Generator) -> None:
    H = spec.hidden_width
    for layer in range(spec.layers):
        F_in = spec.in_width if layer == 0 else H
        # gates stacked as (reset, update, candidate)
        W_ih = torch.cat([glorot_uniform(F_in, H, generator) for _ in range(3)])
        W_hh = torch.cat([glorot_uniform(H, H, generator) for _ in range(3)])
        store.add(f"{prefix}.l{layer}.W_ih", W_ih)
        store.add(f"{prefix}.l{layer}.W_hh", W_hh)
        store.add(f"{prefix}.l{layer}.b_ih", torch.zeros(3 * H, dtype=DTYPE))
        store.add(f"{prefix}.l{layer}.b_hh", torch.zeros(3 * H, dtype=DTYPE))


def gru_cell(x_proj: torch.Tensor, h: torch.Tensor, W_hh: torch.Tensor, b_hh: torch.Tensor) -> torch.Tensor:
    """One step given the precomputed input projection ``W_ih x + b_ih``."""
    H = h.shape[-1]
    h_proj = h @ W_hh.T + b_hh
    r = torch.sigmoid(x_proj[..., :H] + h_proj[..., :H])
    z = torch.sigmoid(x_proj[..., H : 2 * H] + h_proj[..., H : 2 * H])
    n = torch.tanh(x_proj[..., 2 * H :] + r * h_proj[..., 2 * H :])
    return (1 - z) * n + z * h


def recurrent_forward(store: ParamStore, prefix: str, spec: RecurrentSpec, seq: torch.Tensor) -> torch.Tensor:
    """Run the stacked GRU left to right.

    ``seq`` is ``T x F`` or ``B x T x F``; the result has the same leading
    shape with the last layer's hidden width.  The initial state is zero.
    """
    if seq.dim() not in (2, 3):
        raise DimensionError(f"expected T x F or B x T x F, got shape {tuple(seq.shape)}")
    if seq.shape[-2] == 0:
        raise EmptyInputError("empty sequence")
    if seq.shape[-1] != spec.in_width:
        raise DimensionError(f"{prefix}: frame width {seq.shape[-1]} != {spec.in_width}")
    batched = seq.dim() == 3
    z = seq if batched else seq.unsqueeze(0)
    T = z.shape[1]
    for layer in range(spec.layers):
        W_ih = store[f"{prefix}.l{layer}.W_ih"]
        b_ih = store[f"{prefix}.l{layer}.b_ih"]
        W_hh = store[f"{prefix}.l{layer}.W_hh"]
        b_hh = store[f"{prefix}.l{layer}.b_hh"]
        x_proj = z @ W_ih.T + b_ih
        h = torch.zeros(z.shape[0], spec.hidden_width, dtype=DTYPE)
        states = []
        for t in range(T):
            h = gru_cell(x_proj[:, t], h, W_hh, b_hh)
            states.append(h)
        z = torch.stack(states, dim=1)
    check_finite(z, f"{prefix} states")
    return z if batched else z[0]


# ---------------------------------------------------------------------------
# gradients and optimization


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into the gradient buffers of every reached parameter."""
    if not torch.is_tensor(loss) or loss.numel() != 1 or loss.dim() > 1:
        raise ContractError("backward needs a scalar loss")
    check_finite(loss.detach(), "loss")
    if loss.requires_grad:
        loss.backward()


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = betas
    for name, p in store.params.items():
        g = store.grad(name)
        if not bool(torch.isfinite(g).all()):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    with torch.no_grad():
        for name, p in store.params.items():
            g = store.grad(name)
            m = store._m[name].mul_(b1).add_(g, alpha=1 - b1)
            v = store._v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return store


@dataclass
class ProbeError:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


def finite_diff_errors(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    h: float = 1e-6,
    samples: int = 20,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> list[ProbeError]:
    """Compare autograd with central differences on random coordinates.

    ``samples`` coordinates are drawn without replacement from the parameters
    listed in ``names`` (all parameters by default).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else list(store.params)

    store.zero_grad()
    loss = loss_fn(store)
    with torch.no_grad():
        again = loss_fn(store)
    if not torch.equal(loss.detach(), again.detach()):
        raise CheckInvalidError("loss_fn is not deterministic")
    backward(loss)

    sizes = np.array([store[n].numel() for n in names])
    flat = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for k in np.sort(flat):
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        name, j = names[i], int(k - offsets[i])
        flat_p = store[name].data.view(-1)
        analytic = float(store.grad(name).reshape(-1)[j])
        orig = float(flat_p[j])
        with torch.no_grad():
            flat_p[j] = orig + h
            up = float(loss_fn(store))
            flat_p[j] = orig - h
            down = float(loss_fn(store))
            flat_p[j] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))
        out.append(ProbeError(name, j, analytic, numeric, rel))
    store.zero_grad()
    return out


def finite_diff_check(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    h: float = 1e-6,
    samples: int = 20,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error ``|a - n| / max(1e-12, |a| + |n|)`` over sampled coordinates."""
    errors = finite_diff_errors(loss_fn, store, h, samples, rng, names)
    return max((e.rel_error for e in errors), default=0.0)


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def stack_names(store: ParamStore, prefixes: Sequence[str]) -> list[str]:
    return [n for n in store.params if any(n.startswith(p) for p in prefixes)]
