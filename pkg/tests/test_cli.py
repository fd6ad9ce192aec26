import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from selfadapt.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main, read_manifest
from selfadapt.config import ConfigError, load_config, read_config_text
from selfadapt.metatrain import read_trace
from selfadapt.model import load_model
from selfadapt.ttadapt import AdaptReport

SMALL = ["pool_size=20", "iterations=3", "batch_per_domain=4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_generate_writes_one_file_per_domain_deterministically(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "generate", f"out_dir={a}", "pool_size=20")[0] == EXIT_OK
    assert run(capsys, "generate", f"out_dir={b}", "pool_size=20")[0] == EXIT_OK
    files = sorted(p.name for p in (a / "data").iterdir())
    assert files == [f"domain{i}.rec" for i in range(4)]
    for f in files:
        assert (a / "data" / f).read_bytes() == (b / "data" / f).read_bytes()
    man = read_manifest(a / "manifest_generate.json")
    assert all(Path(p).exists() for p in man.artifacts) and not man.missing()


def test_unknown_config_key_is_named(tmp_path, capsys):
    code, _, err = run(capsys, "generate", f"out_dir={tmp_path}", "nonsense_key=1")
    assert code == EXIT_CONFIG and "nonsense_key" in err


def test_bad_value_and_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "train", f"out_dir={tmp_path}", "iterations=abc")
    assert code == EXIT_CONFIG and "iterations" in err
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nseed = 3\nlambda = 0.5\n")
    c = load_config(cfg, ["mu=2"])
    assert (c.seed, c.lam, c.mu) == (3, 0.5, 2.0)
    with pytest.raises(ConfigError):
        read_config_text("just words\n")


def test_missing_inputs_exit_code(tmp_path, capsys):
    assert run(capsys, "eval", tmp_path / "none.json", tmp_path / "x.rec")[0] == EXIT_MISSING
    assert run(capsys, "report", tmp_path / "nowhere")[0] == EXIT_MISSING
    assert run(capsys, "train", "--config", tmp_path / "no.cfg")[0] == EXIT_MISSING
    code = run(capsys, "train", f"out_dir={tmp_path}", "--data", tmp_path, *SMALL)[0]
    assert code == EXIT_MISSING


def test_train_adapt_eval_report_chain(tmp_path, capsys):
    data = tmp_path / "gen"
    run(capsys, "generate", f"out_dir={data}", "pool_size=20")
    t1, t2 = tmp_path / "t1", tmp_path / "t2"
    for out in (t1, t2):
        code, stdout, _ = run(capsys, "train", "--data", data / "data", f"out_dir={out}",
                              "target=3", *SMALL)
        assert code == EXIT_OK and stdout.splitlines()[1].startswith("3,")
    m1, m2 = load_model(t1 / "model.json"), load_model(t2 / "model.json")
    assert m1.params.checksum() == m2.params.checksum()
    assert len(read_trace(t1 / "trace.jsonl")) == 3

    target = data / "data" / "domain3.rec"
    code, stdout, _ = run(capsys, "adapt", t1 / "model.json", target, f"out_dir={t1}")
    assert code == EXIT_OK
    rep = AdaptReport.from_dict(json.loads((t1 / "adapt_report.json").read_text()))
    assert rep.frozen_ok and len(rep.batches) == 1

    code, stdout, _ = run(capsys, "eval", t1 / "adapted_model.json", target, f"out_dir={t1}")
    assert code == EXIT_OK and stdout.splitlines()[0] == "hter,auc,threshold,far,frr"
    assert 0.0 <= json.loads((t1 / "eval_report.json").read_text())["auc"] <= 1.0

    code, stdout, _ = run(capsys, "report", t1)
    assert code == EXIT_OK and (t1 / "trace_summary.csv").exists()
    for name in ("train", "adapt", "eval", "report"):
        assert not read_manifest(t1 / f"manifest_{name}.json").missing()


def test_protocol_and_report(tmp_path, capsys):
    out = tmp_path / "p"
    code, stdout, _ = run(capsys, "protocol", f"out_dir={out}", "seeds=0", "tasks=0,1",
                          "variants=baseline,ours", *SMALL)
    assert code == EXIT_OK
    assert stdout == (out / "summary.csv").read_text()
    (out / "summary.csv").unlink()
    code, stdout, err = run(capsys, "report", out)
    assert code == EXIT_OK
    rows = (out / "summary.csv").read_text().splitlines()
    assert len(rows) == 3 and len(rows[0].split(",")) == 1 + 2 * 2
    for t in (0, 1):
        root = ET.parse(out / "plots" / f"roc_task{t}.svg").getroot()
        assert root.tag.endswith("svg")
    man = read_manifest(out / "manifest_report.json")
    assert man.artifacts and not man.missing()

    (out / "roc" / "task1_ours_seed0.csv").unlink()
    code, _, err = run(capsys, "report", out)
    assert code == EXIT_OK and "missing cell task1/ours/seed0" in err
