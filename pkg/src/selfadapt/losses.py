"""Training objectives: classification, depth, reconstruction, entropy,
SRIP orthogonality and the combined unsupervised adaptor loss.

Sums over samples are reduced as batch means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, clip, log, sqrt

PROB_EPS = 1e-7
ENTROPY_FORMS = ("bernoulli", "single_term")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1  # reconstruction
    mu: float = 10.0  # orthogonality

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class AblationMask:
    use_ae: bool = True
    use_orth: bool = True
    use_ent: bool = True

    def __post_init__(self):
        if not (self.use_ae or self.use_orth or self.use_ent):
            raise ValueError("ablation mask must keep at least one adaptor loss term")


def _clamped(p: Tensor) -> Tensor:
    return clip(p, PROB_EPS, 1.0 - PROB_EPS)


def cls_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of P(live) against 0/1 labels."""
    probs = as_tensor(probs)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("cls_loss: empty batch")
    if y.shape != probs.shape:
        raise ShapeError(f"cls_loss: labels {y.shape} vs probabilities {probs.shape}")
    p = _clamped(probs)
    ll = Tensor(y) * log(p) + Tensor(1.0 - y) * log(1.0 - p)
    return -ll.mean()


def _mse(a: Tensor, b: Tensor, name: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return (d * d).mean()


def depth_loss(pred: Tensor, target) -> Tensor:
    return _mse(pred, target, "depth_loss")


def ae_loss(recon: Tensor, features: Tensor) -> Tensor:
    """Mean squared reconstruction error.

    Only arguments that carry a graph receive gradient; detach ``features``
    at the call site to keep the reconstruction target fixed.
    """
    return _mse(recon, features, "ae_loss")


def entropy_loss(probs: Tensor, form: str = "bernoulli") -> Tensor:
    probs = as_tensor(probs)
    if probs.size == 0:
        raise ValueError("entropy_loss: empty batch")
    p = _clamped(probs)
    h = -(p * log(p))
    if form == "bernoulli":
        q = 1.0 - p
        h = h - q * log(q)
    elif form != "single_term":
        raise ValueError(f"unknown entropy form {form!r}")
    return h.mean()


def _start_vector(k: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(k)
    return v / np.linalg.norm(v)


def orth_loss(theta_A: Tensor, iterations: int = 2, seed: int = 0) -> Tensor:
    """Spectral norm of ``W^T W - I`` by power iteration.

    Every iteration is recorded, so the estimate is differentiable.  The unit
    start vector is drawn from ``seed``; callers vary the seed between calls
    so that training cannot align the adaptor with one fixed start direction.
    """
    W = as_tensor(theta_A)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ShapeError(f"orth_loss: adaptor weight must be square, got {W.shape}")
    k = W.shape[0]
    M = W.T @ W - Tensor(np.eye(k))
    v = Tensor(_start_vector(k, seed).reshape(k, 1))
    for _ in range(iterations):
        u = M @ v
        v = u / (sqrt((u * u).sum()) + 1e-12)
    u = M @ v
    return sqrt((u * u).sum() + 1e-24)


def adaptor_loss(probs: Tensor, recon: Tensor | None, features: Tensor | None,
                 theta_A: Tensor, weights: LossWeights = LossWeights(),
                 mask: AblationMask = AblationMask(), entropy_form: str = "bernoulli",
                 orth_iterations: int = 2, orth_seed: int = 0) -> tuple[Tensor, dict[str, float]]:
    """Entropy + lam * reconstruction + mu * orthogonality, honoring ``mask``.

    Returns the total and the unweighted component values; disabled terms are
    never evaluated and report 0.
    """
    total = Tensor(0.0)
    parts = {"ent": 0.0, "ae": 0.0, "orth": 0.0}
    if mask.use_ent:
        e = entropy_loss(probs, entropy_form)
        parts["ent"] = e.item()
        total = total + e
    if mask.use_ae:
        a = ae_loss(recon, features)
        parts["ae"] = a.item()
        total = total + weights.lam * a
    if mask.use_orth:
        o = orth_loss(theta_A, orth_iterations, orth_seed)
        parts["orth"] = o.item()
        total = total + weights.mu * o
    return total, parts


def combine(ent: float, ae: float, orth: float, weights: LossWeights = LossWeights()) -> float:
    return ent + weights.lam * ae + weights.mu * orth
