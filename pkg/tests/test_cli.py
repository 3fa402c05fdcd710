import csv
import json

import numpy as np
import pytest

from fmplan import io
from fmplan.cli import load_l2o, load_teacher, main, save_teacher

TINY = {"fmd": {"batch_size": 2}, "l2plan": {"inner_steps": 2, "outer_window": 2}}


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    data = d / "data"
    assert run("gen-data", "--out", data, "--num-cases", 3, "--seed", 5, "--config", cfg) == 0
    assert run("train-teacher", "--data", data, "--out", d / "teacher.fmpl", "--steps", 2, "--config", cfg) == 0
    assert run("distill", "--teacher", d / "teacher.fmpl", "--data", data, "--out", d / "gen.fmpl", "--steps", 1,
               "--config", cfg) == 0
    assert run("train-l2o", "--generator", d / "gen.fmpl", "--cases", data, "--out", d / "l2o.fmpl",
               "--meta-steps", 1, "--config", cfg) == 0
    return d, cfg, data


def test_gen_data_layout_and_determinism(pipeline, tmp_path):
    d, cfg, data = pipeline
    files = sorted((data / "cases").glob("*.json"))
    assert [f.name for f in files] == ["case00000.json", "case00001.json", "case00002.json"]
    assert io.load_checkpoint(data / "maps.fmpl")[0]["maps"].shape == (72, 16, 24)
    assert run("gen-data", "--out", tmp_path, "--num-cases", 3, "--seed", 5, "--config", cfg) == 0
    for f in files:
        assert (tmp_path / "cases" / f.name).read_bytes() == f.read_bytes()
    assert (tmp_path / "maps.fmpl").read_bytes() == (data / "maps.fmpl").read_bytes()


def test_training_outputs(pipeline):
    d, _, _ = pipeline
    assert len(rows(d / "teacher.csv")) == 3
    assert rows(d / "gen.csv")[0] == ["step", "fake_loss", "loss_d", "loss_g"]
    res, meta = load_l2o(d / "l2o.fmpl")
    assert len(res.history) == 1 and meta["kind"] == "l2o"


def test_checkpoint_save_load_save_is_byte_identical(pipeline, tmp_path):
    d, _, _ = pipeline
    res = load_teacher(d / "teacher.fmpl")
    save_teacher(tmp_path / "again.fmpl", res, io.load_checkpoint(d / "teacher.fmpl")[1]["seed"])
    assert (tmp_path / "again.fmpl").read_bytes() == (d / "teacher.fmpl").read_bytes()


def test_resume_continues_loss_curve(pipeline, tmp_path):
    d, cfg, data = pipeline
    out = tmp_path / "t2.fmpl"
    assert run("train-teacher", "--data", data, "--out", out, "--steps", 2, "--resume", d / "teacher.fmpl",
               "--config", cfg) == 0
    r = rows(tmp_path / "t2.csv")
    assert [x[0] for x in r[1:]] == ["1", "2", "3", "4"]
    assert r[1:3] == rows(d / "teacher.csv")[1:]
    assert run("train-l2o", "--generator", d / "gen.fmpl", "--cases", data, "--out", tmp_path / "l.fmpl",
               "--meta-steps", 1, "--resume", d / "l2o.fmpl", "--config", cfg) == 0
    assert len(load_l2o(tmp_path / "l.fmpl")[0].history) == 2


def test_plan_sequence_evaluate(pipeline, tmp_path):
    d, cfg, data = pipeline
    case = data / "cases" / "case00001.json"
    out = tmp_path / "p.json"
    assert run("plan", "--case", case, "--generator", d / "gen.fmpl", "--optimizer", "l2o", "--l2o",
               d / "l2o.fmpl", "--steps", 4, "--out", out, "--flex", "ptv", "--figures", "--config", cfg) == 0
    trace = rows(tmp_path / "p_trace.csv")
    assert trace[0] == ["step", "L_dose", "L_cont_z", "L_cont_mu", "total"] and len(trace) == 5
    pgms = sorted((tmp_path / "p_dose").glob("*.pgm"))
    assert len(pgms) == io.load_case(case).target_dose.shape[2]
    for name in ("loss", "fluence", "dose", "dvh"):
        assert (tmp_path / f"p_{name}.png").read_bytes()[:4] == b"\x89PNG"
    assert run("sequence", "--case", case, "--plan", out, "--out", tmp_path / "s.json") == 0
    assert json.loads((tmp_path / "s.json").read_text())["violations"] == []
    assert run("evaluate", "--case", case, "--plan", out, "--out", tmp_path / "m.csv", "--with-ls") == 0
    m = rows(tmp_path / "m.csv")
    assert m[0] == io.METRICS_HEADER and [r[3] for r in m[1:]] == ["pre_ls", "post_ls"]


def test_compare_tables(pipeline, tmp_path):
    d, cfg, data = pipeline
    out = tmp_path / "cmp.csv"
    assert run("compare", "--cases", data, "--generator", d / "gen.fmpl", "--l2o", d / "l2o.fmpl",
               "--optimizers", "l2o,adam", "--steps", "2,3", "--out", out, "--with-ls", "--no-timing",
               "--figures", "--config", cfg) == 0
    r = rows(out)
    assert len(r) == 1 + 3 * 2 * 2 * 2
    assert {x[-1] for x in r[1:]} == {"nan"}
    assert [x[:4] for x in r[1:5]] == [["case00000", "l2o", "2", "post_ls"], ["case00000", "l2o", "2", "pre_ls"],
                                       ["case00000", "l2o", "3", "post_ls"], ["case00000", "l2o", "3", "pre_ls"]]
    assert len(rows(tmp_path / "cmp_summary.csv")) == 1 + 2 * 2 * 2
    pv = rows(tmp_path / "cmp_pvalues.csv")
    assert pv[0] == ["optimizer", "steps", "stage", "metric", "t", "p"] and {x[0] for x in pv[1:]} == {"adam"}
    assert (tmp_path / "cmp_mae.png").exists()
    again = tmp_path / "again.csv"
    assert run("compare", "--cases", data, "--generator", d / "gen.fmpl", "--l2o", d / "l2o.fmpl",
               "--optimizers", "l2o,adam", "--steps", "2,3", "--out", again, "--with-ls", "--no-timing",
               "--config", cfg) == 0
    assert again.read_bytes() == out.read_bytes()


def test_usage_errors(pipeline, tmp_path, capsys):
    d, cfg, data = pipeline
    case = data / "cases" / "case00000.json"
    assert run("gen-data", "--out", tmp_path / "x", "--num-cases", 0) == 2
    assert run("distill", "--data", data, "--out", tmp_path / "g.fmpl") == 2
    assert run("plan", "--case", case, "--generator", d / "gen.fmpl", "--optimizer", "l2o",
               "--out", tmp_path / "p.json") == 2
    assert run("plan", "--case", case, "--generator", d / "gen.fmpl", "--optimizer", "adam", "--steps", 0,
               "--out", tmp_path / "p.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"fmd": {"nope": 1}}')
    assert run("gen-data", "--out", tmp_path / "x", "--num-cases", 1, "--config", bad) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("fmplan: error 2: ") for line in err) and len(err) == 5
    with pytest.raises(SystemExit) as exc:
        run("plan", "--optimizer", "newton")
    assert exc.value.code == 2


def test_data_errors(pipeline, tmp_path, capsys):
    d, cfg, data = pipeline
    (tmp_path / "empty").mkdir()
    assert run("compare", "--cases", tmp_path / "empty", "--generator", d / "gen.fmpl", "--optimizers", "adam",
               "--out", tmp_path / "c.csv") == 3
    assert run("plan", "--case", tmp_path / "missing.json", "--generator", d / "gen.fmpl", "--optimizer", "adam",
               "--out", tmp_path / "p.json") == 3
    assert run("plan", "--case", data / "cases" / "case00000.json", "--generator", d / "teacher.fmpl",
               "--optimizer", "adam", "--out", tmp_path / "p.json") == 3
    assert run("distill", "--teacher", tmp_path / "nope.fmpl", "--data", data, "--out", tmp_path / "g.fmpl") == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 4 and all(line.startswith("fmplan: error 3: ") for line in err)


def test_numeric_failure_exit_code(pipeline, tmp_path, monkeypatch):
    d, cfg, data = pipeline
    from fmplan import cli
    from fmplan.l2plan.planner import RolloutError

    def boom(*a, **k):
        raise RolloutError("non-finite planning loss")

    monkeypatch.setattr(cli, "plan", boom)
    assert run("plan", "--case", data / "cases" / "case00000.json", "--generator", d / "gen.fmpl",
               "--optimizer", "adam", "--out", tmp_path / "p.json") == 4
