import csv
import warnings

import numpy as np
import pytest

from conftest import synthetic_curve
from ktune import bd
from ktune.corpus import synthetic_corpus
from ktune.encoders import PROFILE_A, SyntheticEncoder, SyntheticProfile
from ktune.model import ClassLabel, ClipResult, Method, OptimizerTrace, TraceEntry, write_results_csv
from ktune.pipeline import RunConfig, run_batch
from ktune.reporting import (
    best_method_per_class,
    convergence_report,
    empirical_cdf,
    generate_report,
    per_class_summary,
    rd_comparison_plot_data,
    savings_cdf,
)


def _res(cid, cls, method, imp):
    return ClipResult(cid, cls, method, 1.3, imp, 0.1, 9)


def test_single_result_summary():
    rows = per_class_summary([_res("a", ClassLabel.SPORTS, Method.BRENT, 8.391)])
    assert len(rows) == 1
    assert rows[0].mean_improvement == rows[0].best_improvement == 8.391
    assert rows[0].best_clip == "a"


def test_mean_and_best():
    rows = per_class_summary([_res("a", ClassLabel.VLOG, Method.GOLDEN, 2.0), _res("b", ClassLabel.VLOG, Method.GOLDEN, 4.0)])
    assert rows[0].mean_improvement == pytest.approx(3.0)
    assert rows[0].best_improvement == 4.0 and rows[0].best_clip == "b"


def test_every_class_reported():
    results = [_res(f"{c.value}-{m.slug}", c, m, i * 0.5) for i, c in enumerate(ClassLabel) for m in Method]
    rows = per_class_summary(results)
    for m in Method:
        assert len([r for r in rows if r.method is m]) == 11
    best = best_method_per_class(rows)
    assert set(best) == set(ClassLabel)


def _trace(vals):
    best, entries = -np.inf, []
    for i, v in enumerate(vals, 1):
        best = max(best, v)
        entries.append(TraceEntry(i, 1.0 + i / 10, v, best))
    return OptimizerTrace(Method.BRENT, tuple(entries))


def test_convergence_normalised():
    rep = convergence_report(_trace([2.0, 6.0, 8.0]), 8.0)
    assert rep.normalized == pytest.approx((0.25, 0.75, 1.0))
    assert rep.fraction_at(2) == pytest.approx(0.75)
    assert rep.fraction_at(99) == 1.0


def test_convergence_zero_final_is_raw():
    rep = convergence_report(_trace([0.0, 0.0]), 0.0)
    assert rep.raw_only and rep.best_so_far == (0.0, 0.0)
    with pytest.raises(ValueError):
        rep.fraction_at(1)


def test_empirical_cdf():
    assert empirical_cdf([7, 1, 5, 3]) == ((1, 0.25), (3, 0.5), (5, 0.75), (7, 1.0))
    assert empirical_cdf([2.5] * 4) == ((2.5, 1.0),)
    assert empirical_cdf([]) == ()


def test_savings_cdf_excludes_uncovered():
    base = synthetic_curve(PROFILE_A, 1.0)
    good = synthetic_curve(PROFILE_A, 1.3)
    cdf = savings_cdf([(base, good), (base, base)], probe_quality=40.0)
    assert cdf.n_included == 2 and cdf.n_excluded == 0
    assert cdf.fraction_at_most(0.0) == 0.5
    far = savings_cdf([(base, good)], probe_quality=80.0)
    assert far.n_included == 0 and far.n_excluded == 1 and far.points == ()


def test_plot_data_baseline_only():
    base = synthetic_curve(PROFILE_A, 1.0)
    series = rd_comparison_plot_data(base)
    assert len(series) == 1
    assert len(series[0].points) == 11 and len(series[0].fitted) == 200


def test_plot_data_candidates_and_fit_consistency():
    base = synthetic_curve(PROFILE_A, 1.0)
    cands = [synthetic_curve(PROFILE_A, k) for k in (0.5, 1.3, 2.0)]
    series = rd_comparison_plot_data(base, cands)
    assert [s.label for s in series] == ["baseline", "k=0.5", "k=1.3", "k=2"]
    for s, c in zip(series, [base, *cands]):
        fit = bd.fit_log_rate(c)
        for r, q in s.fitted:
            assert abs(np.log10(r) - fit(q)) < 1e-9


def test_generate_report(tmp_path):
    clips, profiles = synthetic_corpus(3, 2)
    run = tmp_path / "run"
    run_batch(RunConfig(out_dir=str(run)), SyntheticEncoder(profiles), clips)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = generate_report(run, tmp_path / "a")
    generate_report(run, tmp_path / "b")
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    out = tmp_path / "a"
    for f in ("summary.csv", "cdf.csv", "cdf_brent.csv", "cdf_stats.json", "figures/class_mean_improvement.svg",
              "figures/savings_cdf.svg", "figures/convergence_golden.svg"):
        assert (out / f).is_file(), f
    assert len(list((out / "convergence").glob("*.csv"))) == 15
    assert len(list((out / "figures" / "rd").glob("*.svg"))) == 5
    # summary means recomputed from results.csv
    with (run / "results.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    with (out / "summary.csv").open() as fh:
        summary = list(csv.DictReader(fh))
    assert sum(int(r["n"]) for r in summary) == 15
    for s in summary:
        vals = [float(r["bd_rate_improvement_pct"]) for r in rows if r["class"] == s["class"] and r["method"] == s["method"]]
        assert float(s["mean_improvement_pct"]) == pytest.approx(sum(vals) / len(vals), abs=1e-9)
    assert a.cdfs["best"].n_included + a.cdfs["best"].n_excluded == 5


def test_generate_report_empty(tmp_path):
    write_results_csv(tmp_path / "results.csv", [])
    with pytest.raises(ValueError, match="no results"):
        generate_report(tmp_path)
    with pytest.raises(FileNotFoundError):
        generate_report(tmp_path / "nowhere")


def test_many_series_convergence_plot_quiet(tmp_path):
    from ktune.reporting import plot_convergence

    reps = [(f"c{i}", convergence_report(_trace([1.0, 2.0 + i]), 2.0 + i)) for i in range(40)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        plot_convergence(reps, tmp_path / "c.svg")
