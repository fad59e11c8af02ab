"""Per-clip optimisation runs: baseline curve, BD-Rate objective, search, persistence."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from ktune import bd
from ktune.encoders import EncodeRequest, Encoder
from ktune.errors import CurveError, KtuneError
from ktune.model import (
    ClipManifest,
    ClipResult,
    Method,
    MetricKind,
    QualityMetric,
    RDCurve,
    RDPoint,
    cleanup_points,
    default_bitrate_ladder,
    load_manifest,
    write_curve_csv,
    write_results_csv,
    write_trace_csv,
)
from ktune.optimizers import Objective, SearchConfig, SearchResult, search

logger = logging.getLogger(__name__)


class EncodeCache:
    """RD points keyed by (clip, k, target, metric, encoder fingerprint).

    With a directory, each entry is also persisted as one ``key=value`` text
    file; writes go through a temp file and an atomic rename.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict[tuple, RDPoint] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(clip_id: str, k: float, target: float, metric: QualityMetric, fingerprint: str) -> tuple:
        return (clip_id, f"{round(k, 6):.6f}", f"{float(target):.3f}", metric.kind.value, fingerprint)

    def _path(self, key: tuple) -> Path:
        name = hashlib.sha256("\x1f".join(key).encode()).hexdigest()
        return self.directory / name[:2] / f"{name}.rec"

    def get(self, key: tuple) -> RDPoint | None:
        with self._lock:
            point = self._mem.get(key)
        if point is None and self.directory is not None:
            path = self._path(key)
            if path.exists():
                rec = dict(line.split("=", 1) for line in path.read_text(encoding="utf-8").splitlines() if "=" in line)
                stored = (rec.get("clip_id"), rec.get("k"), rec.get("target_bitrate"), rec.get("metric"), rec.get("fingerprint"))
                if stored == key:
                    point = RDPoint(
                        target_bitrate=float.fromhex(rec["point_target_bitrate"]),
                        achieved_bitrate=float.fromhex(rec["achieved_bitrate"]),
                        quality=float.fromhex(rec["quality"]),
                        k=float.fromhex(rec["point_k"]),
                    )
                    with self._lock:
                        self._mem[key] = point
        with self._lock:
            if point is None:
                self.misses += 1
            else:
                self.hits += 1
        return point

    def put(self, key: tuple, point: RDPoint) -> None:
        with self._lock:
            self._mem[key] = point
        if self.directory is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            f"clip_id={key[0]}",
            f"k={key[1]}",
            f"target_bitrate={key[2]}",
            f"metric={key[3]}",
            f"fingerprint={key[4]}",
            f"point_target_bitrate={float(point.target_bitrate).hex()}",
            f"achieved_bitrate={float(point.achieved_bitrate).hex()}",
            f"quality={float(point.quality).hex()}",
            f"point_k={float(point.k).hex()}",
        ]
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)


def build_rd_curve(
    clip: ClipManifest,
    k: float,
    ladder: Sequence[float],
    metric: QualityMetric,
    backend: Encoder,
    cache: EncodeCache | None = None,
    pool: ThreadPoolExecutor | None = None,
    audit: bool = False,
) -> RDCurve:
    """Encode every ladder rung at ``k`` (cache first) and return the cleaned curve.

    ``audit`` re-encodes cache hits and raises if they differ from the stored point.
    """
    if len(set(ladder)) < 4:
        raise CurveError(f"insufficient points: ladder has {len(set(ladder))} distinct rates, need 4")
    cache = cache if cache is not None else EncodeCache()
    fp = backend.fingerprint

    def one(rate: float) -> RDPoint:
        key = EncodeCache.key(clip.clip_id, k, rate, metric, fp)
        point = cache.get(key)
        if point is not None and not audit:
            return point
        try:
            fresh = backend.encode(EncodeRequest(clip, k, rate, metric))
        except KtuneError as exc:
            raise type(exc)(f"{clip.clip_id}: encode failed at k={k:g}, bitrate={rate:g}: {exc}") from exc
        if point is not None and point != fresh:
            raise CurveError(f"{clip.clip_id}: cache audit mismatch at k={k:g}, bitrate={rate:g}: {point} != {fresh}")
        if point is None:
            cache.put(key, fresh)
        return fresh

    points = list(pool.map(one, ladder)) if pool is not None else [one(r) for r in ladder]
    kept, dropped = cleanup_points(points)
    if dropped:
        logger.info("%s k=%g: dropped %d non-monotone point(s)", clip.clip_id, k, len(dropped))
    return RDCurve(k=k, metric=metric, points=tuple(kept))


class ClipObjective(Objective):
    """BD-Rate improvement of the k-curve against the baseline; keeps every curve it built."""

    def __init__(self, clip, baseline, ladder, metric, backend, cache, pool=None):
        self.clip = clip
        self.baseline = baseline
        self.curves: dict[float, RDCurve] = {}
        self.bd_results: dict[float, bd.BDResult] = {}

        def fn(k: float) -> float:
            curve = build_rd_curve(clip, k, ladder, metric, backend, cache, pool)
            res = bd.bd_rate(baseline, curve)
            self.curves[k] = curve
            self.bd_results[k] = res
            return res.bd_rate_improvement

        super().__init__(fn)


def make_objective(clip, baseline_curve, ladder, metric, backend, cache, pool=None) -> ClipObjective:
    return ClipObjective(clip, baseline_curve, ladder, metric, backend, cache, pool)


@dataclass(frozen=True)
class RunConfig:
    manifest: str | None = None
    methods: tuple[Method, ...] = (Method.MULTIRES, Method.GOLDEN, Method.BRENT)
    metric: QualityMetric = QualityMetric()
    ladder: tuple[float, ...] = tuple(default_bitrate_ladder())
    search: SearchConfig = SearchConfig()
    backend: str = "synthetic"
    parallelism: int = 1
    cache_dir: str | None = None
    out_dir: str = "run"
    probe_quality: float | None = 40.0
    template: str | None = None
    encoder_version: str = ""
    timeout: float = 1800.0
    profiles: str | None = None
    noise: float = 0.0

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [m.value for m in self.methods]
        d["metric"] = {"kind": self.metric.kind.value, "ssim_db": self.metric.ssim_db}
        d["ladder"] = list(self.ladder)
        d["search"]["refine_deltas"] = list(self.search.refine_deltas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "methods" in d:
            d["methods"] = tuple(Method.parse(m) for m in d["methods"])
        if "metric" in d:
            m = d["metric"]
            if isinstance(m, str):
                m = {"kind": m}
            d["metric"] = QualityMetric(MetricKind(m["kind"].upper()), bool(m.get("ssim_db", False)))
        if "ladder" in d:
            d["ladder"] = tuple(float(x) for x in d["ladder"])
        if "search" in d:
            s = dict(d["search"])
            if "refine_deltas" in s:
                s["refine_deltas"] = tuple(s["refine_deltas"])
            d["search"] = SearchConfig(**s)
        return cls(**d)


@dataclass
class ClipOutcome:
    result: ClipResult
    search: SearchResult
    baseline: RDCurve
    best_curve: RDCurve
    savings_at_probe: float | None
    encodes: int = 0


def optimize_clip(
    clip: ClipManifest,
    method: Method,
    cfg: RunConfig,
    backend: Encoder,
    cache: EncodeCache | None = None,
    baseline: RDCurve | None = None,
    pool: ThreadPoolExecutor | None = None,
) -> ClipOutcome:
    cache = cache if cache is not None else EncodeCache()
    if baseline is None:
        baseline = build_rd_curve(clip, 1.0, cfg.ladder, cfg.metric, backend, cache, pool)
    obj = make_objective(clip, baseline, cfg.ladder, cfg.metric, backend, cache, pool)
    found = search(method, obj, cfg.search)
    k_star = found.k_star
    best_curve = obj.curves.get(k_star, baseline)
    res = obj.bd_results.get(k_star) or bd.bd_rate(baseline, best_curve)
    savings = None
    if cfg.probe_quality is not None:
        try:
            savings = bd.savings_at_quality(baseline, best_curve, cfg.probe_quality)
        except KtuneError:
            savings = None
    result = ClipResult(
        clip_id=clip.clip_id,
        class_label=clip.class_label,
        method=method,
        k_star=k_star,
        bd_rate_improvement=found.improvement,
        bd_quality_delta=res.bd_quality_delta,
        objective_evaluations=found.evaluations,
        trace=found.trace,
    )
    return ClipOutcome(result, found, baseline, best_curve, savings)


@dataclass
class BatchSummary:
    out_dir: Path
    results: list[ClipResult] = field(default_factory=list)
    outcomes: list[ClipOutcome] = field(default_factory=list)
    failures: list[tuple[str, str, str]] = field(default_factory=list)
    backend_calls: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def run_batch(
    cfg: RunConfig,
    backend: Encoder,
    clips: Sequence[ClipManifest] | None = None,
    progress=None,
) -> BatchSummary:
    """Optimise every (clip, method) pair and write the run directory.

    Layout: ``results.csv``, ``savings.csv``, ``failures.csv``, ``config.json``,
    ``traces/<clip>__<method>.csv``, ``curves/<clip>__{baseline,<method>}.csv``
    and the encode cache (``cache/`` unless ``cache_dir`` is set).
    """
    if clips is None:
        if cfg.manifest is None:
            raise ValueError("no manifest configured")
        clips = load_manifest(cfg.manifest)
    out = Path(cfg.out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    cache = EncodeCache(cfg.cache_dir or out / "cache")
    calls_before = getattr(backend, "calls", 0)
    lock = threading.Lock()

    def per_clip(clip: ClipManifest):
        outcomes, failures = [], []
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            try:
                baseline = build_rd_curve(clip, 1.0, cfg.ladder, cfg.metric, backend, cache, pool)
            except Exception as exc:  # isolate one bad clip from the batch
                logger.error("%s: baseline failed: %s", clip.clip_id, exc)
                return outcomes, [(clip.clip_id, m.value, str(exc)) for m in cfg.methods]
            for method in cfg.methods:
                try:
                    oc = optimize_clip(clip, method, cfg, backend, cache, baseline, pool)
                except Exception as exc:
                    logger.error("%s/%s failed: %s", clip.clip_id, method.value, exc)
                    failures.append((clip.clip_id, method.value, str(exc)))
                    continue
                outcomes.append(oc)
                if progress is not None:
                    with lock:
                        progress(oc)
        return outcomes, failures

    summary = BatchSummary(out)
    with ThreadPoolExecutor(max_workers=cfg.parallelism) as clip_pool:
        for outcomes, failures in clip_pool.map(per_clip, clips):
            summary.outcomes.extend(outcomes)
            summary.failures.extend(failures)
    summary.results = [oc.result for oc in summary.outcomes]
    summary.backend_calls = getattr(backend, "calls", 0) - calls_before

    write_results_csv(out / "results.csv", summary.results)
    baselines_written = set()
    for oc in summary.outcomes:
        stem = f"{_safe(oc.result.clip_id)}__{oc.result.method.slug}"
        write_trace_csv(out / "traces" / f"{stem}.csv", oc.result.trace)
        write_curve_csv(out / "curves" / f"{stem}.csv", oc.best_curve)
        if oc.result.clip_id not in baselines_written:
            write_curve_csv(out / "curves" / f"{_safe(oc.result.clip_id)}__baseline.csv", oc.baseline)
            baselines_written.add(oc.result.clip_id)
    order = {m: i for i, m in enumerate(Method)}
    with (out / "savings.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("clip_id", "method", "probe_quality", "savings_pct"))
        for oc in sorted(summary.outcomes, key=lambda o: (o.result.clip_id, order[o.result.method])):
            sv = "" if oc.savings_at_probe is None else f"{oc.savings_at_probe:.6g}"
            probe = "" if cfg.probe_quality is None else f"{cfg.probe_quality:g}"
            w.writerow((oc.result.clip_id, oc.result.method.value, probe, sv))
    with (out / "failures.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("clip_id", "method", "error"))
        w.writerows(sorted(summary.failures))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
