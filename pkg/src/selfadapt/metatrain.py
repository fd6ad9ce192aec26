"""Meta-learned adaptor training.

Each iteration draws a meta-train domain and a different meta-test domain,
takes one plain gradient step of the classifier (classification loss) and of
the autoencoder (reconstruction loss) on the meta-train batch, one unsupervised
step of the adaptor on the meta-test inputs, then scores the adapted classifier
on the labelled meta-test batch.  The outer update moves F, C, D and A along
the gradients of the accumulated losses; R simply takes its inner-updated value.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import GradMode, Tape, Tensor, grad, no_record
from .datagen import DomainBatch
from .losses import AblationMask, LossWeights, adaptor_loss, ae_loss, cls_loss, depth_loss
from .model import (MomentAccumulator, ModelSpec, TrainedModel, forward_C, forward_C_l1,
                    forward_Ca, forward_Ca_l1, forward_D, forward_F, forward_R, init_params)
from .nn import AdamState, Hyperparams, ParamGroup, ParamSet, adam_step, init_adam, sgd_step

log = logging.getLogger(__name__)

OUTER_GROUPS = ("F", "C", "D", "A")


class NumericalError(RuntimeError):
    def __init__(self, message: str, trace: "MetaStepTrace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass
class MetaConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    grad_mode: GradMode = GradMode.SECOND_ORDER
    mask: AblationMask = field(default_factory=AblationMask)
    iterations: int = 2000
    seed: int = 0
    disable_meta: bool = False
    outer_optimizer: str = "adam"  # or "sgd": raw beta-scaled gradients
    entropy_form: str = "bernoulli"
    orth_iterations: int = 2
    spec: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self):
        self.grad_mode = GradMode.parse(self.grad_mode)
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown outer optimizer {self.outer_optimizer!r}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.hyper.lam, self.hyper.mu)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grad_mode"] = self.grad_mode.value
        return d


@dataclass
class MetaStepTrace:
    iteration: int
    trn: int | None = None
    val: int | None = None
    cls_hat: float | None = None
    dep_hat: float | None = None
    ae_hat: float | None = None
    adap: float | None = None
    adap_ent: float | None = None
    adap_ae: float | None = None
    adap_orth: float | None = None
    cls_tilde: float | None = None
    dep_tilde: float | None = None
    grad_norms: dict[str, float] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        d = {k: v for k, v in asdict(self).items()
             if k not in ("iteration", "trn", "val", "grad_norms") and v is not None}
        d.update({f"grad_{k}": v for k, v in self.grad_norms.items()})
        return d

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.values().values())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


TRACE_FIELDS = tuple(MetaStepTrace.__dataclass_fields__)


def read_trace(path: str | Path) -> list[MetaStepTrace]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(MetaStepTrace(**json.loads(line)))
    return out


def pick_domains(domains: Sequence | int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniformly random ordered pair of distinct domain indices."""
    n = domains if isinstance(domains, int) else len(domains)
    if n < 2:
        raise ValueError("need at least two domains to pick meta-train/meta-test")
    trn = int(rng.integers(n))
    val = int(rng.integers(n - 1))
    if val >= trn:
        val += 1
    return trn, val


def _require_batch(x) -> None:
    if len(x) == 0:
        raise ValueError("empty batch")


@dataclass
class MetaTrainOut:
    C_prime: ParamGroup
    R_prime: ParamGroup
    cls: Tensor
    dep: Tensor
    ae: Tensor


def meta_train_phase(params: ParamSet, batch: DomainBatch, cfg: MetaConfig) -> MetaTrainOut:
    """Inner steps on the meta-train batch; nothing in ``params`` is modified."""
    _require_batch(batch)
    spec, alpha = cfg.spec, cfg.hyper.alpha
    f = forward_F(params["F"], batch.x, spec)
    cls = cls_loss(forward_C(params["C"], f), batch.y)
    gC = grad(cls, params["C"].values(), cfg.grad_mode)
    C_prime = sgd_step(params["C"], gC, alpha)

    dep = depth_loss(forward_D(params["D"], f, spec), batch.depth)

    # reconstruction target is fixed: only R is trained here
    h = forward_C_l1(params["C"], f).detach()
    ae = ae_loss(forward_R(params["R"], h), h)
    gR = grad(ae, params["R"].values(), cfg.grad_mode)
    R_prime = sgd_step(params["R"], gR, alpha)
    return MetaTrainOut(C_prime, R_prime, cls, dep, ae)


def adaptor_objective(A: ParamGroup, f: Tensor, C: ParamGroup, R: ParamGroup,
                      weights: LossWeights, mask: AblationMask, entropy_form: str = "bernoulli",
                      orth_iterations: int = 2, residual: str = "pre", orth_seed: int = 0):
    """Unsupervised adaptor loss on feature maps ``f``; gradient reaches only ``A``."""
    need_ae = mask.use_ae
    need_probs = mask.use_ent
    probs = forward_Ca(C, A, f, residual) if need_probs else None
    recon = h = None
    if need_ae:
        h = forward_Ca_l1(C, A, f, residual=residual)
        recon = forward_R(R, h)
    return adaptor_loss(probs, recon, h, A["W"], weights, mask, entropy_form, orth_iterations,
                        orth_seed)


def adaptor_inner_update(params: ParamSet, C_prime: ParamGroup, R_prime: ParamGroup,
                         x: np.ndarray, cfg: MetaConfig, orth_seed: int = 0):
    """One unsupervised adaptor step on meta-test inputs (labels are never passed)."""
    _require_batch(x)
    f = forward_F(params["F"], x, cfg.spec).detach()
    loss, parts = adaptor_objective(
        params["A"], f, C_prime.detached(), R_prime.detached(), cfg.weights, cfg.mask,
        cfg.entropy_form, cfg.orth_iterations, cfg.spec.residual, orth_seed)
    gA = grad(loss, params["A"].values(), cfg.grad_mode) if loss.requires_grad else \
        [Tensor(np.zeros(t.shape)) for t in params["A"].values()]
    A_prime = sgd_step(params["A"], gA, cfg.hyper.alpha)
    return A_prime, loss, parts


def meta_test_phase(params: ParamSet, C_prime: ParamGroup, A_prime: ParamGroup,
                    batch: DomainBatch, cfg: MetaConfig) -> tuple[Tensor, Tensor]:
    _require_batch(batch)
    f = forward_F(params["F"], batch.x, cfg.spec)
    cls = cls_loss(forward_Ca(C_prime, A_prime, f, cfg.spec.residual), batch.y)
    dep = depth_loss(forward_D(params["D"], f, cfg.spec), batch.depth)
    return cls, dep


def outer_gradients(params: ParamSet, losses: dict[str, Tensor]) -> dict[str, list[Tensor]]:
    """Meta-gradients for F, C, D and A.

    C: cls_hat + cls_tilde; F: both depth and both classification losses;
    D: both depth losses; A: adaptor loss + cls_tilde.  The adaptor loss sees
    detached features and classifier, and the depth losses never touch C or A,
    so one backward pass over their sum yields each group's prescribed
    gradient.
    """
    total = (losses["cls_hat"] + losses["cls_tilde"] + losses["dep_hat"]
             + losses["dep_tilde"] + losses["adap"])
    if total.tape is None:
        raise ValueError("stale tape: losses carry no graph to the parameters")
    wrt = [t for g in OUTER_GROUPS for t in params[g].values()]
    flat = grad(total, wrt, GradMode.FIRST_ORDER)
    out, i = {}, 0
    for g in OUTER_GROUPS:
        n = len(params[g].tensors)
        out[g] = flat[i:i + n]
        i += n
    return out


def meta_optimize(params: ParamSet, losses: dict[str, Tensor], R_prime: ParamGroup,
                  states: dict[str, AdamState], cfg: MetaConfig):
    """Apply the outer updates; returns (new params, new states, grad norms)."""
    grads = outer_gradients(params, losses)
    new_groups, new_states, norms = {}, dict(states), {}
    for g in OUTER_GROUPS:
        norms[g] = float(np.sqrt(sum(float(np.sum(t.data ** 2)) for t in grads[g])))
        if cfg.outer_optimizer == "adam":
            new_states[g], new_groups[g] = adam_step(states[g], params[g].detached(), grads[g])
        else:
            with no_record():
                new_groups[g] = sgd_step(params[g].detached(), grads[g], cfg.hyper.beta)
    new_groups["R"] = R_prime.detached()
    norms["R"] = 0.0
    return params.replace(**new_groups), new_states, norms


def meta_step(params: ParamSet, states: dict[str, AdamState], hat: DomainBatch,
              tilde: DomainBatch, cfg: MetaConfig, iteration: int = 0):
    """One full iteration on a fresh tape; returns (params, states, trace)."""
    with Tape():
        leaves = ParamSet({g: params[g].leaves() for g in params.groups})
        mt = meta_train_phase(leaves, hat, cfg)
        A_prime, adap, parts = adaptor_inner_update(leaves, mt.C_prime, mt.R_prime, tilde.x, cfg,
                                                    orth_seed=cfg.seed * 1_000_003 + iteration)
        cls_t, dep_t = meta_test_phase(leaves, mt.C_prime, A_prime, tilde, cfg)
        losses = {"cls_hat": mt.cls, "dep_hat": mt.dep, "ae_hat": mt.ae, "adap": adap,
                  "cls_tilde": cls_t, "dep_tilde": dep_t}
        new_params, new_states, norms = meta_optimize(leaves, losses, mt.R_prime, states, cfg)
    trace = MetaStepTrace(
        iteration=iteration, trn=hat.domain_id, val=tilde.domain_id,
        cls_hat=mt.cls.item(), dep_hat=mt.dep.item(), ae_hat=mt.ae.item(),
        adap=adap.item(), adap_ent=parts["ent"], adap_ae=parts["ae"], adap_orth=parts["orth"],
        cls_tilde=cls_t.item(), dep_tilde=dep_t.item(), grad_norms=norms,
    )
    return new_params, new_states, trace


def baseline_step(params: ParamSet, states: dict[str, AdamState], batch: DomainBatch,
                  cfg: MetaConfig, iteration: int = 0):
    """Adaptor-free supervised step on pooled sources (classification + depth).

    R is also fitted to C's first-layer features so the result can later be
    adapted with the full unsupervised loss; this does not touch F, C or D.
    """
    spec = cfg.spec
    with Tape():
        leaves = ParamSet({g: params[g].leaves() for g in params.groups})
        f = forward_F(leaves["F"], batch.x, spec)
        cls = cls_loss(forward_C(leaves["C"], f), batch.y)
        dep = depth_loss(forward_D(leaves["D"], f, spec), batch.depth)
        groups = ("F", "C", "D")
        wrt = [t for g in groups for t in leaves[g].values()]
        flat = grad(cls + dep, wrt)
        h = forward_C_l1(leaves["C"], f).detach()
        ae = ae_loss(forward_R(leaves["R"], h), h)
        gR = grad(ae, leaves["R"].values())
    new_groups, new_states, norms, i = {}, dict(states), {}, 0
    for g in groups:
        n = len(leaves[g].tensors)
        gs = flat[i:i + n]
        i += n
        norms[g] = float(np.sqrt(sum(float(np.sum(t.data ** 2)) for t in gs)))
        if cfg.outer_optimizer == "adam":
            new_states[g], new_groups[g] = adam_step(states[g], params[g], gs)
        else:
            new_groups[g] = sgd_step(params[g], gs, cfg.hyper.beta)
    new_groups["R"] = sgd_step(params["R"], gR, cfg.hyper.alpha)
    norms["R"] = float(np.sqrt(sum(float(np.sum(t.data ** 2)) for t in gR)))
    trace = MetaStepTrace(iteration=iteration, cls_hat=cls.item(), dep_hat=dep.item(),
                          ae_hat=ae.item(), grad_norms=norms)
    return params.replace(**new_groups), new_states, trace


def _concat(batches: Iterable[DomainBatch]) -> DomainBatch:
    bs = list(batches)
    return DomainBatch(np.concatenate([b.x for b in bs]), np.concatenate([b.y for b in bs]),
                       np.concatenate([b.depth for b in bs]), -1)


def source_moments(model: TrainedModel, domains: Sequence[DomainBatch], batch: int = 100):
    acc = MomentAccumulator(model.spec.k)
    with no_record():
        for d in domains:
            for i in range(0, len(d), batch):
                acc.update(forward_F(model.params["F"], d.x[i:i + batch], model.spec).data)
    return acc.result()


def train(cfg: MetaConfig, domains: Sequence[DomainBatch],
          trace_path: str | Path | None = None, params: ParamSet | None = None) -> TrainedModel:
    """Run ``cfg.iterations`` iterations over the given source domains."""
    if len(domains) < 2:
        raise ValueError("training needs at least two source domains")
    rng = np.random.default_rng([cfg.seed, 1])
    params = params if params is not None else init_params(cfg.spec, cfg.seed)
    states = {g: init_adam(params[g], cfg.hyper.beta) for g in OUTER_GROUPS}
    bsz = cfg.hyper.batch_per_domain
    fh = open(trace_path, "w") if trace_path is not None else None
    traces: list[MetaStepTrace] = []
    try:
        for it in range(cfg.iterations):
            if cfg.disable_meta:
                batch = _concat(d.stratified(bsz, rng) for d in domains)
                params, states, trace = baseline_step(params, states, batch, cfg, it)
            else:
                trn, val = pick_domains(domains, rng)
                tilde = domains[val].stratified(bsz, rng)
                hat = domains[trn].stratified(bsz, rng)
                params, states, trace = meta_step(params, states, hat, tilde, cfg, it)
            if fh is not None:
                fh.write(trace.to_json() + "\n")
            traces.append(trace)
            if not trace.finite():
                raise NumericalError(f"non-finite loss at iteration {it}", trace)
    finally:
        if fh is not None:
            fh.close()
    model = TrainedModel(params=params, spec=cfg.spec, config=cfg.to_dict(),
                         trace_path=str(trace_path) if trace_path is not None else None)
    model.source_moments = source_moments(model, domains)
    model.traces = traces
    return model
