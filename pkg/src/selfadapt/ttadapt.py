"""Inference-time adaptation: only the adaptor moves, using unlabeled target
inputs and nothing from the source domains."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, grad, no_record
from .losses import AblationMask, LossWeights
from .metatrain import NumericalError, adaptor_objective
from .model import MomentAccumulator, TrainedModel, forward_Ca, forward_F
from .nn import GROUP_NAMES, adam_step, init_adam, sgd_step

BASELINE_MODES = ("none", "bn_stats", "entropy_only")


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 1
    batch_size: int = 20
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    mask: AblationMask = field(default_factory=AblationMask)
    baseline: str = "none"
    optimizer: str = "sgd"
    entropy_form: str = "bernoulli"
    orth_iterations: int = 2
    shuffle_seed: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.baseline not in BASELINE_MODES:
            raise ValueError(f"unknown baseline mode {self.baseline!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def effective_mask(self) -> AblationMask:
        if self.baseline == "entropy_only":
            return AblationMask(use_ae=False, use_orth=False, use_ent=True)
        return self.mask


@dataclass
class BatchRecord:
    before: dict[str, float]
    after: dict[str, float]
    loss_before: float
    loss_after: float


@dataclass
class AdaptReport:
    batches: list[BatchRecord] = field(default_factory=list)
    delta_norm: float = 0.0
    frozen_checksum_before: str = ""
    frozen_checksum_after: str = ""
    aborted: bool = False

    @property
    def frozen_ok(self) -> bool:
        return self.frozen_checksum_before == self.frozen_checksum_after

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptReport":
        d = dict(d)
        d["batches"] = [BatchRecord(**b) for b in d.get("batches", [])]
        return cls(**d)


FROZEN = tuple(g for g in GROUP_NAMES if g != "A")


def _batches(n: int, size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _evaluate(model: TrainedModel, A, f: Tensor, cfg: AdaptConfig, mask: AblationMask,
              orth_seed: int = 0):
    return adaptor_objective(A, f, model.params["C"], model.params["R"], cfg.weights, mask,
                             cfg.entropy_form, cfg.orth_iterations, model.spec.residual,
                             orth_seed)


def adapt(model: TrainedModel, target_inputs: np.ndarray,
          cfg: AdaptConfig = AdaptConfig()) -> tuple[TrainedModel, AdaptReport]:
    """Optimize only the adaptor on unlabeled ``target_inputs`` (N, 3, H, W).

    Returns an adapted copy; the input model is left untouched.  A non-finite
    loss aborts and restores the pre-adaptation adaptor.
    """
    x_all = np.asarray(target_inputs, dtype=np.float64)
    out = model.copy()
    report = AdaptReport(frozen_checksum_before=out.params.checksum(FROZEN))
    A0 = out.params["A"].detached()
    mask = cfg.effective_mask
    rng = np.random.default_rng(cfg.shuffle_seed) if cfg.shuffle_seed is not None else None
    adam = init_adam(A0, cfg.lr) if cfg.optimizer == "adam" else None

    with no_record():
        f_all = out.features(x_all).data

    A = A0
    step = 0
    for _ in range(cfg.epochs):
        for idx in _batches(len(x_all), cfg.batch_size, rng):
            f = Tensor(f_all[idx])
            step += 1
            with Tape():
                leaves = A.leaves()
                loss, before = _evaluate(out, leaves, f, cfg, mask, step)
                gA = grad(loss, leaves.values())
            if not (math.isfinite(loss.item()) and all(np.all(np.isfinite(g.data)) for g in gA)):
                report.aborted = True
                out.params = out.params.replace(A=A0)
                raise NumericalError("non-finite adaptor loss during adaptation")
            if adam is not None:
                adam, A = adam_step(adam, A, gA)
            else:
                A = sgd_step(A, gA, cfg.lr)
            with no_record():
                loss_after, after = _evaluate(out, A, f, cfg, mask, step)
            report.batches.append(BatchRecord(before, after, loss.item(), loss_after.item()))

    out.params = out.params.replace(A=A)
    report.delta_norm = float(np.linalg.norm(A["W"].data - A0["W"].data))
    report.frozen_checksum_after = out.params.checksum(FROZEN)
    return out, report


def predict(model: TrainedModel, inputs: np.ndarray) -> np.ndarray:
    """Per-sample P(live) from the adapted classifier."""
    with no_record():
        f = model.features(inputs)
        return forward_Ca(model.params["C"], model.params["A"], f, model.spec.residual).data


def mean_entropy(model: TrainedModel, inputs: np.ndarray) -> float:
    p = np.clip(predict(model, inputs), 1e-7, 1 - 1e-7)
    return float(np.mean(-p * np.log(p) - (1 - p) * np.log(1 - p)))


def adaptor_loss_value(model: TrainedModel, inputs: np.ndarray,
                       cfg: AdaptConfig = AdaptConfig()) -> float:
    with no_record():
        loss, _ = _evaluate(model, model.params["A"], model.features(inputs), cfg,
                            cfg.effective_mask)
    return loss.item()


def feature_moments(model: TrainedModel, inputs: np.ndarray, batch: int = 100):
    acc = MomentAccumulator(model.spec.k)
    with no_record():
        for i in range(0, len(inputs), batch):
            acc.update(forward_F(model.params["F"], inputs[i:i + batch], model.spec).data)
    return acc.result()


def baseline_bn_stats(model: TrainedModel, target_inputs: np.ndarray) -> TrainedModel:
    """Replace source feature moments by target moments between F and C."""
    if model.source_moments is None:
        raise ValueError("model carries no recorded source feature moments")
    out = model.copy()
    out.recalibration = feature_moments(model, np.asarray(target_inputs, dtype=np.float64))
    return out


__all__ = ["AdaptConfig", "AdaptReport", "adapt", "baseline_bn_stats", "predict"]
