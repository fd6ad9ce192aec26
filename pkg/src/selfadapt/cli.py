"""Command-line entry point: generate / train / adapt / eval / protocol / report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .datagen import make_domains, read_records, write_records
from .metatrain import NumericalError, read_trace, train
from .metrics import EvalReport, evaluate
from .model import load_model, save_model
from .plotting import mean_curve, plot_roc
from .protocol import (load_result, make_pools, read_roc_csv, run_protocol, summary_rows,
                       task_name, write_roc_csv, write_summary)
from .ttadapt import adapt, predict

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

MANIFEST_FORMAT = "selfadapt-run"
MANIFEST_VERSION = 1

log = logging.getLogger("selfadapt")


def code_version() -> str:
    try:
        return metadata.version("selfadapt")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    command: str
    config_digest: str
    code_version: str = field(default_factory=code_version)
    started: float = field(default_factory=time.time)
    finished: float | None = None
    artifacts: list[str] = field(default_factory=list)

    def add(self, path: str | Path) -> Path:
        self.artifacts.append(str(path))
        return Path(path)

    def missing(self) -> list[str]:
        return [p for p in self.artifacts if not Path(p).exists()]

    def write(self, path: str | Path) -> Path:
        self.finished = time.time()
        path = Path(path)
        body = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, **self.__dict__}
        path.write_text(json.dumps(body, indent=1, sort_keys=True))
        return path


def read_manifest(path: str | Path) -> RunManifest:
    d = json.loads(Path(path).read_text())
    if d.pop("format", None) != MANIFEST_FORMAT or d.pop("version", None) != MANIFEST_VERSION:
        raise ValueError(f"{path}: not a run manifest of a supported version")
    return RunManifest(**d)


def _require(path: str | Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(manifest: RunManifest, out: Path) -> None:
    manifest.write(out / f"manifest_{manifest.command}.json")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig) -> RunManifest:
    out = _out_dir(cfg)
    man = RunManifest("generate", cfg.digest())
    pcfg = cfg.protocol_config()
    specs = make_domains(cfg.n_domains, cfg.domain_seed)
    (out / "data").mkdir(exist_ok=True)
    for spec, batch in zip(specs, make_pools(pcfg)):
        write_records(batch, man.add(out / "data" / f"domain{spec.domain_id}.rec"), spec)
        print(f"domain{spec.domain_id}.rec,{len(batch)}")
    _finish(man, out)
    return man


def _load_domains(cfg: RunConfig, data_dir: str | None):
    if data_dir is None:
        return make_pools(cfg.protocol_config())
    files = sorted(_require(data_dir).glob("domain*.rec"),
                   key=lambda p: int(p.stem.removeprefix("domain")))
    if not files:
        raise FileNotFoundError(f"missing input: no domain*.rec files in {data_dir}")
    return [read_records(p)[0] for p in files]


def cmd_train(cfg: RunConfig, data_dir: str | None = None) -> RunManifest:
    out = _out_dir(cfg)
    man = RunManifest("train", cfg.digest())
    domains = _load_domains(cfg, data_dir)
    sources = [d for d in domains if d.domain_id != cfg.target]
    trace_path = man.add(out / "trace.jsonl")
    try:
        model = train(cfg.meta_config(), sources, trace_path)
    except NumericalError:
        lines = trace_path.read_text().splitlines() if trace_path.exists() else []
        for line in lines[-5:]:
            print(line, file=sys.stderr)
        raise
    save_model(model, man.add(out / "model.json"))
    last = model.traces[-1].values() if model.traces else {}
    print(",".join(["iterations"] + sorted(last)))
    print(",".join([str(len(model.traces))] + [f"{last[k]:.6g}" for k in sorted(last)]))
    _finish(man, out)
    return man


def cmd_adapt(cfg: RunConfig, model_path: str, data_path: str) -> RunManifest:
    model = load_model(_require(model_path))
    batch, _ = read_records(_require(data_path))
    out = _out_dir(cfg)
    man = RunManifest("adapt", cfg.digest())
    adapted, report = adapt(model, batch.x, cfg.adapt_config())
    save_model(adapted, man.add(out / "adapted_model.json"))
    man.add(out / "adapt_report.json").write_text(report.to_json())
    print("batches,delta_norm,frozen_ok,loss_first,loss_last")
    first = report.batches[0].loss_before if report.batches else float("nan")
    lastl = report.batches[-1].loss_after if report.batches else float("nan")
    print(f"{len(report.batches)},{report.delta_norm:.6g},{report.frozen_ok},"
          f"{first:.6g},{lastl:.6g}")
    _finish(man, out)
    return man


def cmd_eval(cfg: RunConfig, model_path: str, data_path: str) -> EvalReport:
    model = load_model(_require(model_path))
    batch, _ = read_records(_require(data_path))
    out = _out_dir(cfg)
    man = RunManifest("eval", cfg.digest())
    report = evaluate(predict(model, batch.x), batch.y)
    man.add(out / "eval_report.json").write_text(json.dumps(report.to_dict(), sort_keys=True))
    write_roc_csv(report, man.add(out / "eval_roc.csv"))
    print("hter,auc,threshold,far,frr")
    print(f"{report.hter:.6f},{report.auc:.6f},{report.threshold:.6g},"
          f"{report.far:.6f},{report.frr:.6f}")
    _finish(man, out)
    return report


def cmd_protocol(cfg: RunConfig) -> RunManifest:
    out = _out_dir(cfg)
    man = RunManifest("protocol", cfg.digest())
    tasks = list(cfg.tasks) if cfg.tasks else None
    result = run_protocol(cfg.protocol_config(), cfg.variants, cfg.seeds, tasks, out,
                          cfg.workers)
    man.add(out / "result.json")
    man.artifacts += sorted(str(p) for p in (out / "reports").glob("*.json"))
    man.artifacts += sorted(str(p) for p in (out / "roc").glob("*.csv"))
    man.artifacts += sorted(str(p) for p in (out / "models").glob("*.json"))
    write_summary(result, man.add(out / "summary.csv"), cfg.n_domains)
    (out / "config.txt").write_text(cfg.dumps())
    man.add(out / "config.txt")
    csv.writer(sys.stdout, lineterminator="\n").writerows(summary_rows(result, cfg.n_domains))
    failed = [c for c in result.cells if c.error]
    for c in failed:
        print(f"failed cell task{c.task}/{c.variant}/seed{c.seed}: {c.error}", file=sys.stderr)
    _finish(man, out)
    return man


def _report_trace(trace_file: Path, out: Path, man: RunManifest) -> None:
    traces = read_trace(trace_file)
    if not traces:
        return
    keys = sorted(traces[0].values())
    with open(man.add(out / "trace_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + keys)
        for t in traces:
            vals = t.values()
            w.writerow([t.iteration] + [repr(vals[k]) for k in keys])
    print(f"trace,{len(traces)} iterations")


def cmd_report(result_dir: str) -> RunManifest:
    """Summary table plus one ROC figure per task; missing cells are listed, not fatal."""
    out = _require(result_dir)
    man = RunManifest("report", "")
    if (out / "trace.jsonl").exists():
        _report_trace(out / "trace.jsonl", out, man)
    if not (out / "result.json").exists():
        if not man.artifacts:
            raise FileNotFoundError(f"missing input: no result.json or trace.jsonl in {out}")
        _finish(man, out)
        return man
    result = load_result(out)
    man.config_digest = result.config_digest
    n = getattr(result, "n_domains", None) or max(result.tasks) + 1
    rows = summary_rows(result, n)
    write_summary(result, man.add(out / "summary.csv"), n)
    csv.writer(sys.stdout, lineterminator="\n").writerows(rows)
    (out / "plots").mkdir(exist_ok=True)
    for t in result.tasks:
        curves = {}
        for v in result.variants:
            runs = []
            for s in result.seeds:
                c = result.cell(t, v, s)
                roc_file = out / "roc" / f"task{t}_{v}_seed{s}.csv"
                if c is None or c.report is None or not roc_file.exists():
                    print(f"missing cell task{t}/{v}/seed{s}", file=sys.stderr)
                    continue
                runs.append(read_roc_csv(roc_file))
            if runs:
                curves[v] = mean_curve(runs)
        plot_roc(curves, man.add(out / "plots" / f"roc_task{t}.svg"), task_name(t, n))
    _finish(man, out)
    return man


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfadapt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
        return sp

    with_config(sub.add_parser("generate", help="write synthetic domain record files"))
    sp = with_config(sub.add_parser("train", help="train a model on the source domains"))
    sp.add_argument("--data", help="directory of domain*.rec files (default: generate)")
    for name, helptext in (("adapt", "adapt the adaptor on unlabeled target data"),
                           ("eval", "score a model on a labeled record file")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("model")
        sp.add_argument("data")
        with_config(sp)
    with_config(sub.add_parser("protocol", help="run the leave-one-domain-out benchmark"))
    sp = sub.add_parser("report", help="summary table and ROC plots for a result directory")
    sp.add_argument("result_dir")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # overrides may also follow an option such as --data
    stray = [e for e in extra if "=" not in e or e.startswith("-")]
    if stray or (extra and not hasattr(args, "overrides")):
        parser.error(f"unrecognized arguments: {' '.join(stray or extra)}")
    if extra:
        args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.result_dir)
            return EXIT_OK
        if args.config is not None:
            _require(args.config)
        cfg = load_config(args.config, args.overrides)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.data)
        elif args.command == "adapt":
            cmd_adapt(cfg, args.model, args.data)
        elif args.command == "eval":
            cmd_eval(cfg, args.model, args.data)
        elif args.command == "protocol":
            cmd_protocol(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
