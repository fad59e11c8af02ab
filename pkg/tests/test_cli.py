import csv
import json
import sys

import pytest

from conftest import synthetic_curve
from ktune.cli import build_parser, main
from ktune.encoders import PROFILE_A
from ktune.model import write_curve_csv


@pytest.fixture
def corpus(tmp_path):
    man, prof = tmp_path / "corpus.csv", tmp_path / "profiles.csv"
    assert main(["synth-corpus", "--out", str(man), "--profiles", str(prof), "--n720", "2", "--n360", "1"]) == 0
    return man, prof


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_optimize_brent(corpus, tmp_path, capsys):
    man, prof = corpus
    out = tmp_path / "run1"
    code = main(["optimize", "--manifest", str(man), "--profiles", str(prof), "--method", "brent", "--backend", "synthetic", "--out", str(out)])
    assert code == 0
    rows = _rows(out / "results.csv")
    assert len(rows) == 3 and {r["method"] for r in rows} == {"Brent"}
    text = capsys.readouterr().out
    assert "3 result(s), 0 failure(s)" in text


def test_optimize_all_methods(corpus, tmp_path):
    man, prof = corpus
    assert main(["optimize", "--manifest", str(man), "--profiles", str(prof), "--method", "all", "--out", str(tmp_path / "r")]) == 0
    rows = _rows(tmp_path / "r" / "results.csv")
    assert len(rows) == 9
    for cid in {r["clip_id"] for r in rows}:
        assert sorted(r["method"] for r in rows if r["clip_id"] == cid) == ["Brent", "GoldenSection", "MultiRes"]


def test_optimize_missing_manifest(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["optimize", "--manifest", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_optimize_failure_exit_1(tmp_path, capsys):
    man = tmp_path / "m.csv"
    man.write_text(f"clip_id,path,class,width,height,frames,fps\nx,{tmp_path / 'x.y4m'},Vlog,640,360,150,30\n")
    code = main(["optimize", "--manifest", str(man), "--backend", "subprocess", "--template",
                 f"{sys.executable} -c pass {{input}}", "--method", "brent", "--out", str(tmp_path / "r")])
    assert code == 1
    assert "FAILED x" in capsys.readouterr().err


def test_print_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"parallelism": 3, "search": {"tolerance": 0.5, "max_evaluations": 9}}))
    assert main(["optimize", "--config", str(cfg), "--tolerance", "0.1", "--print-config"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["parallelism"] == 3
    assert resolved["search"]["tolerance"] == 0.1
    assert resolved["search"]["max_evaluations"] == 9
    assert resolved["search"]["k_min"] == 0.2


def _curves(tmp_path):
    base = synthetic_curve(PROFILE_A, 1.0)
    write_curve_csv(tmp_path / "a.csv", base)
    write_curve_csv(tmp_path / "b.csv", base)
    with open(tmp_path / "scaled.csv", "w") as fh:
        fh.write("achieved_bitrate,quality\n")
        for p in base.points:
            fh.write(f"{p.achieved_bitrate * 0.9!r},{p.quality!r}\n")
    with open(tmp_path / "far.csv", "w") as fh:
        fh.write("achieved_bitrate,quality\n")
        for p in base.points:
            fh.write(f"{p.achieved_bitrate!r},{p.quality + 100!r}\n")


def test_bdrate_identical(tmp_path, capsys):
    _curves(tmp_path)
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 0
    assert "bd_rate_improvement: 0.000000%" in capsys.readouterr().out


def test_bdrate_scaled(tmp_path, capsys):
    _curves(tmp_path)
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "scaled.csv"), "--probe-quality", "40"]) == 0
    out = capsys.readouterr().out
    val = float(out.split("bd_rate_improvement: ")[1].split("%")[0])
    assert abs(val - 10.0) <= 1e-4
    assert "savings_at_40: 10.000000%" in out


def test_bdrate_no_overlap(tmp_path, capsys):
    _curves(tmp_path)
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "far.csv")]) == 1
    assert "no overlapping quality range" in capsys.readouterr().err


def test_bdrate_missing_file(tmp_path):
    assert main(["bdrate", str(tmp_path / "x.csv"), str(tmp_path / "y.csv")]) == 2


def test_report(corpus, tmp_path, capsys):
    man, prof = corpus
    run = tmp_path / "run"
    main(["optimize", "--manifest", str(man), "--profiles", str(prof), "--method", "golden", "--out", str(run)])
    assert main(["report", str(run), "--no-rd-plots"]) == 0
    for f in ("summary.csv", "cdf.csv", "figures/savings_cdf.svg"):
        assert (run / "report" / f).is_file()
    assert any((run / "report" / "convergence").iterdir())
    (run / "traces" / next(iter(sorted(p.name for p in (run / "traces").iterdir())))).unlink()
    capsys.readouterr()
    assert main(["report", str(run)]) == 1
    assert "missing trace file" in capsys.readouterr().err


def test_report_empty(tmp_path):
    (tmp_path / "results.csv").write_text("clip_id,class,method,k_star,bd_rate_improvement_pct,bd_quality_delta,objective_evaluations\n")
    assert main(["report", str(tmp_path)]) == 1
    assert main(["report", str(tmp_path / "missing")]) == 1


def test_encode_probe(corpus, capsys):
    man, prof = corpus
    assert main(["encode-probe", "--manifest", str(man), "--profiles", str(prof), "--k", "1.0", "--bitrate", "1000000"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("clip_id=") and "quality=" in out


@pytest.mark.parametrize("cmd", ["optimize", "bdrate", "report", "encode-probe", "synth-corpus"])
def test_help_lists_flags(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text


@pytest.mark.parametrize("argv", [["optimize", "--bogus"], ["bdrate", "a", "b", "--nope"], ["report"], ["optimize", "--method", "simplex"]])
def test_bad_flags_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err
