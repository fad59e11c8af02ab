"""Corpus analytics over optimisation results: class tables, convergence, savings CDF, RD plots."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ktune import bd
from ktune.errors import KtuneError
from ktune.model import (
    ClassLabel,
    ClipResult,
    Method,
    OptimizerTrace,
    QualityMetric,
    RDCurve,
    read_curve_csv,
    read_results_csv,
    read_trace_csv,
)

SUMMARY_HEADER = ("class", "method", "n", "mean_improvement_pct", "best_improvement_pct")
CDF_HEADER = ("savings_pct", "cumulative_fraction")
FIT_SAMPLES = 200


@dataclass(frozen=True)
class ClassSummary:
    class_label: ClassLabel
    method: Method
    n: int
    mean_improvement: float
    best_improvement: float
    best_clip: str


def per_class_summary(results: Sequence[ClipResult]) -> list[ClassSummary]:
    """Mean and best improvement per (class, method); classes without results are omitted."""
    groups: dict[tuple[ClassLabel, Method], list[ClipResult]] = defaultdict(list)
    for r in results:
        groups[(r.class_label, r.method)].append(r)
    class_order = {c: i for i, c in enumerate(ClassLabel)}
    method_order = {m: i for i, m in enumerate(Method)}
    rows = []
    for (cls, method), rs in sorted(groups.items(), key=lambda kv: (class_order[kv[0][0]], method_order[kv[0][1]])):
        vals = [r.bd_rate_improvement for r in rs]
        top = max(rs, key=lambda r: (r.bd_rate_improvement, r.clip_id))
        rows.append(ClassSummary(cls, method, len(rs), float(np.mean(vals)), top.bd_rate_improvement, top.clip_id))
    return rows


def best_method_per_class(summary: Sequence[ClassSummary]) -> dict[ClassLabel, ClassSummary]:
    best: dict[ClassLabel, ClassSummary] = {}
    for row in summary:
        cur = best.get(row.class_label)
        if cur is None or row.best_improvement > cur.best_improvement:
            best[row.class_label] = row
    return best


def write_summary_csv(path, summary: Sequence[ClassSummary]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summary:
            w.writerow((s.class_label.value, s.method.value, s.n, repr(s.mean_improvement), repr(s.best_improvement)))


@dataclass(frozen=True)
class ConvergenceReport:
    method: Method
    iterations: tuple[int, ...]
    k: tuple[float, ...]
    best_so_far: tuple[float, ...]
    normalized: tuple[float, ...] | None  # None when the final improvement is not positive
    final_improvement: float

    @property
    def raw_only(self) -> bool:
        return self.normalized is None

    def fraction_at(self, evaluation: int) -> float:
        """Normalised best-so-far after ``evaluation`` objective calls."""
        if self.normalized is None:
            raise ValueError("no normalisation for a non-positive final improvement")
        idx = min(evaluation, len(self.normalized)) - 1
        return self.normalized[idx]


def convergence_report(trace: OptimizerTrace, final_improvement: float) -> ConvergenceReport:
    best = tuple(e.best_so_far for e in trace.iterations)
    norm = None
    if final_improvement > 0:
        norm = tuple(min(1.0, max(0.0, b / final_improvement)) for b in best)
    return ConvergenceReport(
        trace.method,
        tuple(e.iteration for e in trace.iterations),
        tuple(e.k for e in trace.iterations),
        best,
        norm,
        final_improvement,
    )


def write_convergence_csv(path, rep: ConvergenceReport) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "k", "best_so_far_pct", "normalized"))
        for i, it in enumerate(rep.iterations):
            nv = "" if rep.normalized is None else repr(rep.normalized[i])
            w.writerow((it, repr(rep.k[i]), repr(rep.best_so_far[i]), nv))


@dataclass(frozen=True)
class SavingsCDF:
    points: tuple[tuple[float, float], ...]  # (savings %, fraction of clips with savings <= it)
    n_included: int
    n_excluded: int
    probe_quality: float

    def fraction_at_most(self, savings_pct: float) -> float:
        frac = 0.0
        for s, f in self.points:
            if s <= savings_pct:
                frac = f
        return frac


def empirical_cdf(values: Iterable[float]) -> tuple[tuple[float, float], ...]:
    vals = np.sort(np.asarray(list(values), dtype=float))
    n = vals.size
    if n == 0:
        return ()
    uniq = np.unique(vals)
    counts = np.searchsorted(vals, uniq, side="right")
    return tuple((float(u), float(c) / n) for u, c in zip(uniq, counts))


def savings_cdf(pairs: Iterable[tuple[RDCurve, RDCurve]], probe_quality: float = 40.0) -> SavingsCDF:
    """Empirical CDF of bitrate savings at ``probe_quality`` over (baseline, candidate) curve pairs.

    Pairs whose fitted curves do not both cover the probe are excluded and counted.
    """
    savings, excluded = [], 0
    for base, cand in pairs:
        try:
            savings.append(bd.savings_at_quality(base, cand, probe_quality))
        except KtuneError:
            excluded += 1
    return SavingsCDF(empirical_cdf(savings), len(savings), excluded, probe_quality)


def write_cdf_csv(path, cdf: SavingsCDF) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CDF_HEADER)
        for s, f in cdf.points:
            w.writerow((repr(s), repr(f)))


@dataclass(frozen=True)
class PlotSeries:
    label: str
    k: float
    points: tuple[tuple[float, float], ...]  # (achieved bitrate, quality)
    fitted: tuple[tuple[float, float], ...]  # samples of the log-rate fit


def rd_comparison_plot_data(baseline: RDCurve, candidates: Sequence[RDCurve] = (), labels: Sequence[str] | None = None) -> list[PlotSeries]:
    curves = [baseline, *candidates]
    if any(c.metric != baseline.metric for c in curves):
        raise ValueError("all curves must share a metric")
    if labels is None:
        labels = ["baseline"] + [f"k={c.k:.4g}" for c in candidates]
    series = []
    for label, curve in zip(labels, curves):
        fit = bd.fit_log_rate(curve)
        q = np.linspace(fit.domain[0], fit.domain[1], FIT_SAMPLES)
        r = 10.0 ** fit(q)
        series.append(
            PlotSeries(
                label,
                curve.k,
                tuple((float(p.achieved_bitrate), float(p.quality)) for p in curve.points),
                tuple(zip(r.tolist(), q.tolist())),
            )
        )
    return series


def write_plot_data_csv(path, series: Sequence[PlotSeries]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("series", "k", "kind", "bitrate", "quality"))
        for s in series:
            for r, q in s.points:
                w.writerow((s.label, repr(s.k), "point", repr(r), repr(q)))
            for r, q in s.fitted:
                w.writerow((s.label, repr(s.k), "fit", repr(r), repr(q)))


# -- figures ----------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ktune"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    import matplotlib.pyplot as plt

    plt.close(fig)


def plot_class_bars(summary: Sequence[ClassSummary], path) -> None:
    plt = _pyplot()
    classes = [c for c in ClassLabel if any(s.class_label is c for s in summary)]
    methods = [m for m in Method if any(s.method is m for s in summary)]
    lookup = {(s.class_label, s.method): s.mean_improvement for s in summary}
    fig, ax = plt.subplots(figsize=(10, 4))
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(classes))
    for i, m in enumerate(methods):
        ax.bar(x + i * width, [lookup.get((c, m), 0.0) for c in classes], width, label=m.value)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels([c.value for c in classes], rotation=30, ha="right")
    ax.set_ylabel("Mean BD-Rate improvement (%)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_convergence(reports: Sequence[tuple[str, ConvergenceReport]], path) -> None:
    plt = _pyplot()
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    for label, rep in reports:
        top.plot(rep.iterations, rep.best_so_far, marker="o", ms=3, label=label)
        if rep.normalized is not None:
            bottom.plot(rep.iterations, rep.normalized, marker="o", ms=3, label=label)
    top.set_ylabel("BD-Rate improvement (%)")
    bottom.set_ylabel("Normalised improvement")
    bottom.set_xlabel("Objective evaluation")
    bottom.set_ylim(0, 1.05)
    if len(reports) <= 10:
        top.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def plot_cdf(cdfs: Sequence[tuple[str, SavingsCDF]], path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, cdf in cdfs:
        if cdf.points:
            xs, ys = zip(*cdf.points)
            ax.step(xs, ys, where="post", label=label)
    probe = cdfs[0][1].probe_quality if cdfs else 0.0
    ax.set_xlabel(f"Bitrate savings at {probe:g} (%)")
    ax.set_ylabel("Cumulative fraction of clips")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_rd(series: Sequence[PlotSeries], path, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, s in enumerate(series):
        color = "black" if i == 0 else f"C{i - 1}"
        r, q = zip(*s.fitted)
        ax.plot(np.asarray(r) / 1e3, q, color=color, label=s.label)
        pr, pq = zip(*s.points)
        ax.plot(np.asarray(pr) / 1e3, pq, "x", color=color)
    ax.set_xscale("log")
    ax.set_xlabel("Bitrate (kb/s)")
    ax.set_ylabel("Quality")
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)


# -- run directory report ---------------------------------------------------


@dataclass
class ReportOutputs:
    out_dir: Path
    summary: list[ClassSummary]
    cdfs: dict[str, SavingsCDF]
    files: list[Path]


def _stem(clip_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in clip_id)


def generate_report(run_dir, out_dir=None, rd_plots: bool = True) -> ReportOutputs:
    """Write summary.csv, cdf.csv, convergence CSVs and SVG figures for a finished run."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "report"
    results_path = run_dir / "results.csv"
    if not results_path.exists():
        raise FileNotFoundError(f"missing results file: {results_path}")
    results = read_results_csv(results_path)
    if not results:
        raise ValueError(f"no results in {results_path}")
    metric, probe = QualityMetric(), 40.0
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
        from ktune.pipeline import RunConfig

        rc = RunConfig.from_dict(cfg)
        metric = rc.metric
        probe = rc.probe_quality if rc.probe_quality is not None else probe

    files: list[Path] = []
    (out / "convergence").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(parents=True, exist_ok=True)

    summary = per_class_summary(results)
    write_summary_csv(out / "summary.csv", summary)
    files.append(out / "summary.csv")

    conv_by_method: dict[Method, list[tuple[str, ConvergenceReport]]] = defaultdict(list)
    pairs_by_method: dict[Method, list[tuple[RDCurve, RDCurve]]] = defaultdict(list)
    best_pairs: dict[str, tuple[float, RDCurve, RDCurve]] = {}
    baselines: dict[str, RDCurve] = {}
    for r in results:
        stem = f"{_stem(r.clip_id)}__{r.method.slug}"
        trace_path = run_dir / "traces" / f"{stem}.csv"
        if not trace_path.exists():
            raise FileNotFoundError(f"missing trace file: {trace_path}")
        rep = convergence_report(read_trace_csv(trace_path, r.method), r.bd_rate_improvement)
        write_convergence_csv(out / "convergence" / f"{stem}.csv", rep)
        files.append(out / "convergence" / f"{stem}.csv")
        conv_by_method[r.method].append((r.clip_id, rep))

        base_path = run_dir / "curves" / f"{_stem(r.clip_id)}__baseline.csv"
        cand_path = run_dir / "curves" / f"{stem}.csv"
        for p in (base_path, cand_path):
            if not p.exists():
                raise FileNotFoundError(f"missing curve file: {p}")
        if r.clip_id not in baselines:
            baselines[r.clip_id] = read_curve_csv(base_path, metric, 1.0)
        base = baselines[r.clip_id]
        cand = read_curve_csv(cand_path, metric, r.k_star)
        pairs_by_method[r.method].append((base, cand))
        prev = best_pairs.get(r.clip_id)
        if prev is None or r.bd_rate_improvement > prev[0]:
            best_pairs[r.clip_id] = (r.bd_rate_improvement, base, cand)

    cdfs = {m.slug: savings_cdf(pairs, probe) for m, pairs in pairs_by_method.items()}
    cdfs["best"] = savings_cdf([(b, c) for _, b, c in (best_pairs[k] for k in sorted(best_pairs))], probe)
    write_cdf_csv(out / "cdf.csv", cdfs["best"])
    files.append(out / "cdf.csv")
    for m in Method:
        if m.slug in cdfs:
            write_cdf_csv(out / f"cdf_{m.slug}.csv", cdfs[m.slug])
            files.append(out / f"cdf_{m.slug}.csv")
    stats = {
        name: {
            "probe_quality": c.probe_quality,
            "included": c.n_included,
            "excluded": c.n_excluded,
            "fraction_savings_at_most_5pct": c.fraction_at_most(5.0),
        }
        for name, c in sorted(cdfs.items())
    }
    (out / "cdf_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(out / "cdf_stats.json")

    figs = out / "figures"
    plot_class_bars(summary, figs / "class_mean_improvement.svg")
    files.append(figs / "class_mean_improvement.svg")
    plot_cdf([(name, cdfs[name]) for name in [m.slug for m in Method if m.slug in cdfs]], figs / "savings_cdf.svg")
    files.append(figs / "savings_cdf.svg")
    for m in Method:
        if m in conv_by_method:
            path = figs / f"convergence_{m.slug}.svg"
            plot_convergence(conv_by_method[m], path)
            files.append(path)
    if rd_plots:
        (figs / "rd").mkdir(exist_ok=True)
        by_clip: dict[str, list[ClipResult]] = defaultdict(list)
        for r in results:
            by_clip[r.clip_id].append(r)
        for clip_id in sorted(by_clip):
            rs = by_clip[clip_id]
            cands = [read_curve_csv(run_dir / "curves" / f"{_stem(clip_id)}__{r.method.slug}.csv", metric, r.k_star) for r in rs]
            series = rd_comparison_plot_data(baselines[clip_id], cands, ["default k=1"] + [f"{r.method.value} k={r.k_star:.4g}" for r in rs])
            write_plot_data_csv(figs / "rd" / f"{_stem(clip_id)}.csv", series)
            plot_rd(series, figs / "rd" / f"{_stem(clip_id)}.svg", title=clip_id)
            files += [figs / "rd" / f"{_stem(clip_id)}.csv", figs / "rd" / f"{_stem(clip_id)}.svg"]
    return ReportOutputs(out, summary, cdfs, files)
