"""Leave-one-domain-out experiment runner, result store and feature export."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import DomainBatch, make_domains, sample_batch
from .losses import AblationMask
from .metatrain import MetaConfig, NumericalError, train
from .metrics import EvalReport, evaluate
from .model import TrainedModel, random_adaptor, save_model
from .ttadapt import (AdaptConfig, adapt, adaptor_loss_value, baseline_bn_stats, mean_entropy,
                      predict)
from .autodiff import no_record

log = logging.getLogger(__name__)

FULL = AblationMask()
NO_AE = AblationMask(use_ae=False)
NO_ORTH = AblationMask(use_orth=False)
NO_ENT = AblationMask(use_ent=False)


@dataclass(frozen=True)
class Variant:
    name: str
    meta: bool  # meta-learned training vs adaptor-free supervised training
    mask: AblationMask = FULL
    adapt: str = "none"  # none | full | entropy_only | bn_stats
    random_adaptor: bool = False


VARIANTS: dict[str, Variant] = {v.name: v for v in [
    Variant("baseline", meta=False),
    Variant("ours_wo_meta", meta=False, adapt="full", random_adaptor=True),
    Variant("ours_wo_adapt", meta=True),
    Variant("ours_wo_AE", meta=True, mask=NO_AE, adapt="full"),
    Variant("ours_wo_Orth", meta=True, mask=NO_ORTH, adapt="full"),
    Variant("ours_wo_Ent", meta=True, mask=NO_ENT, adapt="full"),
    Variant("adapbn", meta=False, adapt="bn_stats"),
    Variant("entropy_only", meta=False, adapt="entropy_only"),
    Variant("ours", meta=True, adapt="full"),
]}


@dataclass
class ProtocolConfig:
    meta: MetaConfig = field(default_factory=MetaConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    n_domains: int = 4
    domain_seed: int = 0
    pool_size: int = 200
    adapt_on: str = "eval"  # eval (transductive) | disjoint

    def __post_init__(self):
        if self.n_domains < 3:
            raise ValueError("the protocol needs at least three domains")
        if self.adapt_on not in ("eval", "disjoint"):
            raise ValueError("adapt_on must be 'eval' or 'disjoint'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["meta"] = self.meta.to_dict()
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class CellResult:
    task: int
    variant: str
    seed: int
    report: EvalReport | None = None
    error: str | None = None
    adaptation: dict | None = None
    training: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        d = dict(d)
        if d.get("report") is not None:
            r = dict(d["report"])
            r["roc"] = [tuple(p) for p in r["roc"]]
            d["report"] = EvalReport(**r)
        return cls(**d)


@dataclass
class ProtocolResult:
    cells: list[CellResult]
    tasks: list[int]
    variants: list[str]
    seeds: list[int]
    config_digest: str

    def cell(self, task: int, variant: str, seed: int) -> CellResult | None:
        for c in self.cells:
            if (c.task, c.variant, c.seed) == (task, variant, seed):
                return c
        return None

    def digest(self) -> str:
        h = hashlib.sha256()
        for c in sorted(self.cells, key=lambda c: (c.task, c.variant, c.seed)):
            h.update(json.dumps(c.to_dict(), sort_keys=True).encode())
        return h.hexdigest()

    def mean(self, variant: str, metric: str, task: int | None = None) -> float:
        vals = [getattr(c.report, metric) for c in self.cells
                if c.variant == variant and c.report is not None
                and (task is None or c.task == task)]
        return float(np.mean(vals)) if vals else float("nan")


def task_name(task: int, n_domains: int) -> str:
    src = "&".join(f"D{i}" for i in range(n_domains) if i != task)
    return f"{src} to D{task}"


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_pools(cfg: ProtocolConfig) -> list[DomainBatch]:
    specs = make_domains(cfg.n_domains, cfg.domain_seed)
    return [sample_batch(s, cfg.pool_size, derive_seed(cfg.domain_seed, 7, s.domain_id))
            for s in specs]


def _split_target(target: DomainBatch, mode: str) -> tuple[np.ndarray, DomainBatch]:
    if mode == "eval":
        return target.x, target
    n = len(target)
    order = np.random.default_rng(0).permutation(n)
    return target.x[order[: n // 2]], target.subset(order[n // 2:])


def _adapt_summary(before: TrainedModel, after: TrainedModel, report, x, cfg) -> dict:
    return {
        "entropy_before": mean_entropy(before, x),
        "entropy_after": mean_entropy(after, x),
        "loss_before": adaptor_loss_value(before, x, cfg),
        "loss_after": adaptor_loss_value(after, x, cfg),
        "batch_loss_deltas": [b.loss_after - b.loss_before for b in report.batches],
        "delta_norm": report.delta_norm,
        "frozen_ok": report.frozen_ok,
    }


def _train_summary(model: TrainedModel, sources: Sequence[DomainBatch], meta: bool) -> dict:
    """Source-domain AUC plus early/late medians of the held-out classification loss."""
    x = np.concatenate([d.x for d in sources])
    y = np.concatenate([d.y for d in sources])
    out = {"source_auc": evaluate(predict(model, x), y).auc, "iterations": len(model.traces)}
    if meta and model.traces:
        tail = max(1, len(model.traces) // 10)
        vals = [t.cls_tilde for t in model.traces]
        out["cls_tilde_first"] = float(np.median(vals[:tail]))
        out["cls_tilde_last"] = float(np.median(vals[-tail:]))
    return out


def run_group(cfg: ProtocolConfig, task: int, seed: int, variants: Sequence[str],
              pools: list[DomainBatch] | None = None,
              model_dir: str | Path | None = None) -> list[CellResult]:
    """All variants of one (held-out task, seed) pair, sharing trained models."""
    pools = pools if pools is not None else make_pools(cfg)
    sources = [p for i, p in enumerate(pools) if i != task]
    adapt_x, eval_set = _split_target(pools[task], cfg.adapt_on)
    trained: dict[tuple, TrainedModel] = {}
    summaries: dict[tuple, dict] = {}
    out = []
    for name in variants:
        v = VARIANTS[name]
        cell = CellResult(task=task, variant=name, seed=seed)
        try:
            key = (v.meta, v.mask)
            if key not in trained:
                mcfg = replace(cfg.meta, seed=derive_seed(seed, task), disable_meta=not v.meta,
                               mask=v.mask)
                trained[key] = train(mcfg, sources)
                summaries[key] = _train_summary(trained[key], sources, v.meta)
                if model_dir is not None:
                    tag = "meta" if v.meta else "base"
                    mtag = "".join(str(int(b)) for b in asdict(v.mask).values())
                    save_model(trained[key],
                               Path(model_dir) / f"task{task}_seed{seed}_{tag}_{mtag}.json")
            model = trained[key]
            cell.training = summaries[key]
            if v.random_adaptor:
                model = model.copy()
                model.params = model.params.replace(
                    A=random_adaptor(model.spec, derive_seed(seed, task, 99)))
            if v.adapt == "bn_stats":
                model = baseline_bn_stats(model, adapt_x)
            elif v.adapt in ("full", "entropy_only"):
                acfg = replace(cfg.adapt, mask=v.mask,
                               baseline="entropy_only" if v.adapt == "entropy_only" else "none")
                adapted, report = adapt(model, adapt_x, acfg)
                cell.adaptation = _adapt_summary(model, adapted, report, adapt_x, acfg)
                model = adapted
            cell.report = evaluate(predict(model, eval_set.x), eval_set.y)
        except (NumericalError, ValueError, FloatingPointError) as exc:
            log.warning("cell %s/%s/%s failed: %s", task, name, seed, exc)
            cell.error = f"{type(exc).__name__}: {exc}"
        out.append(cell)
    return out


def _run_group_args(args):
    return run_group(*args)


def run_protocol(cfg: ProtocolConfig, variants: Sequence[str], seeds: Sequence[int],
                 tasks: Sequence[int] | None = None, out_dir: str | Path | None = None,
                 workers: int = 1) -> ProtocolResult:
    """Train, adapt and evaluate every (held-out task, variant, seed) cell."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    tasks = list(range(cfg.n_domains)) if tasks is None else list(tasks)
    pools = make_pools(cfg)
    model_dir = Path(out_dir) / "models" if out_dir is not None else None
    jobs = [(cfg, t, s, list(variants), pools, model_dir) for t in tasks for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            groups = list(ex.map(_run_group_args, jobs))
    else:
        groups = [run_group(*j) for j in jobs]
    cells = [c for g in groups for c in g]
    cells.sort(key=lambda c: (c.task, list(variants).index(c.variant), c.seed))
    result = ProtocolResult(cells, tasks, list(variants), list(seeds), cfg.digest())
    if out_dir is not None:
        write_result(result, out_dir, cfg)
    return result


# ---------------------------------------------------------------------------
# persistence


def write_roc_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "tpr"])
        for t, a, b in report.roc:
            w.writerow([repr(t), repr(a), repr(b)])


def read_roc_csv(path: str | Path) -> list[tuple[float, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [tuple(float(v) for v in r) for r in rows]


def write_result(result: ProtocolResult, out_dir: str | Path, cfg: ProtocolConfig | None = None):
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "roc").mkdir(parents=True, exist_ok=True)
    for c in result.cells:
        stem = f"task{c.task}_{c.variant}_seed{c.seed}"
        (out / "reports" / f"{stem}.json").write_text(json.dumps(c.to_dict(), sort_keys=True))
        if c.report is not None:
            write_roc_csv(c.report, out / "roc" / f"{stem}.csv")
    meta = {"tasks": result.tasks, "variants": result.variants, "seeds": result.seeds,
            "config_digest": result.config_digest, "digest": result.digest(),
            "n_domains": cfg.n_domains if cfg else None}
    (out / "result.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_result(out_dir: str | Path) -> ProtocolResult:
    out = Path(out_dir)
    meta = json.loads((out / "result.json").read_text())
    cells = []
    for p in sorted((out / "reports").glob("*.json")):
        cells.append(CellResult.from_dict(json.loads(p.read_text())))
    order = {v: i for i, v in enumerate(meta["variants"])}
    cells.sort(key=lambda c: (c.task, order.get(c.variant, 99), c.seed))
    res = ProtocolResult(cells, meta["tasks"], meta["variants"], meta["seeds"],
                         meta["config_digest"])
    res.n_domains = meta.get("n_domains")  # type: ignore[attr-defined]
    return res


def summary_rows(result: ProtocolResult, n_domains: int | None = None) -> list[list[str]]:
    """Variants x tasks table of seed-mean HTER% / AUC% (one decimal)."""
    n = n_domains or (max(result.tasks) + 1)
    header = ["variant"]
    for t in result.tasks:
        name = task_name(t, n)
        header += [f"{name} HTER(%)", f"{name} AUC(%)"]
    rows = [header]
    for v in result.variants:
        row = [v]
        for t in result.tasks:
            h = result.mean(v, "hter", t)
            a = result.mean(v, "auc", t)
            row += ["failed" if math.isnan(h) else f"{100 * h:.1f}",
                    "failed" if math.isnan(a) else f"{100 * a:.1f}"]
        rows.append(row)
    return rows


def write_summary(result: ProtocolResult, path: str | Path, n_domains: int | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(summary_rows(result, n_domains))
    return path


# ---------------------------------------------------------------------------


def dump_features(model: TrainedModel, inputs: np.ndarray, labels, domain_ids,
                  path: str | Path) -> int:
    """Write pooled C_a features with label and domain id, one CSV row per sample."""
    from .model import pooled_features

    with no_record():
        feats = pooled_features(model.params["C"], model.params["A"], model.features(inputs),
                                model.spec.residual).data
    labels = np.broadcast_to(np.asarray(labels), (len(feats),))
    domain_ids = np.broadcast_to(np.asarray(domain_ids), (len(feats),))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label", "domain"])
        for f, y, d in zip(feats, labels, domain_ids):
            w.writerow([repr(float(v)) for v in f] + [int(y), int(d)])
    return len(feats)


def read_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    feats = np.array([[float(v) for v in r[:-2]] for r in rows])
    return feats, np.array([int(r[-2]) for r in rows]), np.array([int(r[-1]) for r in rows])
