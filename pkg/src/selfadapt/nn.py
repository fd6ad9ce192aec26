"""Parameter containers, layers and optimizers on top of :mod:`selfadapt.autodiff`."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, conv1x1, relu, sigmoid, ShapeError

GROUP_NAMES = ("F", "C", "D", "R", "A")

__all__ = [
    "GROUP_NAMES",
    "AdamState",
    "Hyperparams",
    "ParamGroup",
    "ParamSet",
    "adam_step",
    "conv1x1",
    "dense",
    "init_adam",
    "init_group",
    "relu",
    "sgd_step",
    "sigmoid",
]


@dataclass
class ParamGroup:
    """A named set of parameter tensors (one of F, C, D, R, A)."""

    name: str
    tensors: dict[str, Tensor]
    trainable: bool = True

    def __post_init__(self):
        if self.name not in GROUP_NAMES:
            raise ValueError(f"unknown parameter group {self.name!r}")

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def __iter__(self):
        return iter(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def with_values(self, values: Sequence[Tensor]) -> "ParamGroup":
        if len(values) != len(self.tensors):
            raise ValueError(f"group {self.name}: expected {len(self.tensors)} tensors, "
                             f"got {len(values)}")
        return ParamGroup(self.name, dict(zip(self.tensors, values)), self.trainable)

    def leaves(self, requires_grad: bool = True) -> "ParamGroup":
        """Fresh leaf tensors holding copies of the current values."""
        return ParamGroup(
            self.name,
            {k: Tensor(v.data, requires_grad=requires_grad, name=f"{self.name}.{k}")
             for k, v in self.tensors.items()},
            self.trainable,
        )

    def detached(self) -> "ParamGroup":
        return ParamGroup(self.name, {k: v.detach() for k, v in self.tensors.items()},
                          self.trainable)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v.data ** 2)) for v in self.tensors.values())))


@dataclass
class ParamSet:
    """The five parameter groups of the network."""

    groups: dict[str, ParamGroup]

    def __post_init__(self):
        missing = set(GROUP_NAMES) - set(self.groups)
        if missing:
            raise ValueError(f"parameter set missing groups {sorted(missing)}")

    def __getitem__(self, key: str) -> ParamGroup:
        return self.groups[key]

    def replace(self, **groups: ParamGroup) -> "ParamSet":
        new = dict(self.groups)
        new.update(groups)
        return ParamSet(new)

    def copy(self) -> "ParamSet":
        return ParamSet({g: grp.detached() for g, grp in self.groups.items()})

    def flat(self) -> list[tuple[str, Tensor]]:
        return [(f"{g}.{k}", t) for g in GROUP_NAMES for k, t in self.groups[g].tensors.items()]

    def checksum(self, groups: Iterable[str] = GROUP_NAMES) -> str:
        h = hashlib.sha256()
        for g in groups:
            for k, t in self.groups[g].tensors.items():
                h.update(f"{g}.{k}{t.shape}".encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 1e-3
    beta: float = 1e-3
    lam: float = 0.1
    mu: float = 10.0
    batch_per_domain: int = 20
    adapt_epochs: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates alpha and beta must be non-negative")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("loss weights lambda and mu must be non-negative")
        if self.batch_per_domain < 2:
            raise ValueError("batch_per_domain must be at least 2")
        if self.adapt_epochs < 1:
            raise ValueError("adapt_epochs must be at least 1")


def sgd_step(params: ParamGroup, grads: Sequence[Tensor], lr: float) -> ParamGroup:
    """Plain gradient step ``theta - lr * grad``.

    Built from recorded operations, so when ``grads`` carry a graph (second-order
    mode) the updated parameters remain differentiable w.r.t. the originals.
    """
    if len(grads) != len(params.tensors):
        raise ValueError(f"group {params.name}: {len(grads)} gradients for "
                         f"{len(params.tensors)} parameters")
    out = []
    for (k, p), g in zip(params.tensors.items(), grads):
        if p.shape != g.shape:
            raise ShapeError(f"{params.name}.{k}: gradient shape {g.shape} != {p.shape}")
        out.append(p - lr * g)
    return params.with_values(out)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: ParamGroup, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m={k: np.zeros(t.shape) for k, t in params.tensors.items()},
        v={k: np.zeros(t.shape) for k, t in params.tensors.items()},
    )


def adam_step(state: AdamState, params: ParamGroup,
              grads: Sequence[Tensor]) -> tuple[AdamState, ParamGroup]:
    """One bias-corrected Adam update; returns new state and new parameters."""
    if set(state.m) != set(params.tensors):
        raise ValueError(f"Adam state not initialized for group {params.name}")
    if len(grads) != len(params.tensors):
        raise ValueError("gradients do not align with parameters")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m_new, v_new, out = {}, {}, []
    for (k, p), g in zip(params.tensors.items(), grads):
        gd = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if gd.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"{params.name}.{k}: gradient shape {gd.shape} != {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * gd
        v = b2 * state.v[k] + (1 - b2) * gd * gd
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out.append(Tensor(p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)))
        m_new[k], v_new[k] = m, v
    new_state = replace(state, step=t, m=m_new, v=v_new)
    return new_state, params.with_values(out)


def dense(W, b, x):
    """Affine map ``x @ W + b`` for row-major batches ``x`` of shape (N, in)."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {W.shape}")
    return x @ W + b


def init_group(name: str, shapes: Mapping[str, tuple[tuple[int, ...], int]],
               rng: np.random.Generator, zero: bool = False) -> ParamGroup:
    """Scaled-uniform fan-in initialization.

    ``shapes`` maps tensor name to ``(shape, fan_in)``; a fan-in of 0 marks a
    bias, which starts at zero.
    """
    tensors = {}
    for key, (shape, fan_in) in shapes.items():
        if zero or fan_in == 0:
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[key] = Tensor(data, name=f"{name}.{key}")
    return ParamGroup(name, tensors)
