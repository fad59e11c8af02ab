"""Domain types: corpus manifests, RD points and curves, optimizer traces and results."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ktune.errors import CurveError, ManifestError

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("clip_id", "path", "class", "width", "height", "frames", "fps")
RESULTS_HEADER = (
    "clip_id",
    "class",
    "method",
    "k_star",
    "bd_rate_improvement_pct",
    "bd_quality_delta",
    "objective_evaluations",
)
TRACE_HEADER = ("iteration", "k", "bd_rate_improvement_pct", "best_so_far_pct")

LADDER_MIN = 256_000
LADDER_MAX = 7_000_000
LADDER_POINTS = 11
MIN_CURVE_POINTS = 4


class ClassLabel(str, Enum):
    ANIMATION = "Animation"
    COVER_SONG = "CoverSong"
    GAMING = "Gaming"
    HOW_TO = "HowTo"
    LIVE_MUSIC = "LiveMusic"
    LYRIC_VIDEO = "LyricVideo"
    MUSIC_VIDEO = "MusicVideo"
    NEWS_CLIP = "NewsClip"
    SPORTS = "Sports"
    TELEVISION_CLIP = "TelevisionClip"
    VLOG = "Vlog"

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        try:
            return cls(text.strip())
        except ValueError:
            valid = ", ".join(c.value for c in cls)
            raise ManifestError(f"unknown class label {text!r}; valid labels: {valid}") from None


class Method(str, Enum):
    MULTIRES = "MultiRes"
    GOLDEN = "GoldenSection"
    BRENT = "Brent"

    @property
    def slug(self) -> str:
        return {"MultiRes": "multires", "GoldenSection": "golden", "Brent": "brent"}[self.value]

    @classmethod
    def parse(cls, text: str) -> "Method":
        t = text.strip()
        for m in cls:
            if t in (m.value, m.slug) or t.lower() == m.value.lower():
                return m
        raise ValueError(f"unknown method {text!r}")


class MetricKind(str, Enum):
    PSNR = "PSNR"
    SSIM = "SSIM"


@dataclass(frozen=True)
class QualityMetric:
    """Quality axis used for one objective.

    With ``ssim_db`` set, SSIM values are mapped to ``-10*log10(1 - SSIM)``
    before curve fitting; raw SSIM is used otherwise.
    """

    kind: MetricKind = MetricKind.PSNR
    ssim_db: bool = False

    @property
    def unit(self) -> str:
        if self.kind is MetricKind.PSNR or self.ssim_db:
            return "dB"
        return ""

    def axis(self, quality):
        q = np.asarray(quality, dtype=float)
        if self.kind is MetricKind.SSIM and self.ssim_db:
            with np.errstate(divide="ignore"):
                return -10.0 * np.log10(1.0 - q)
        return q

    def check(self, quality: float) -> None:
        if not math.isfinite(quality):
            raise CurveError(f"non-finite quality {quality!r}")
        if self.kind is MetricKind.PSNR and quality <= 0:
            raise CurveError(f"PSNR must be > 0, got {quality}")
        if self.kind is MetricKind.SSIM and not 0.0 < quality <= 1.0:
            raise CurveError(f"SSIM must be in (0, 1], got {quality}")


PSNR = QualityMetric(MetricKind.PSNR)
SSIM = QualityMetric(MetricKind.SSIM)


@dataclass(frozen=True)
class ClipManifest:
    clip_id: str
    source_path: Path
    class_label: ClassLabel
    resolution: tuple[int, int]
    frame_count: int = 150
    fps: float = 30.0

    def __post_init__(self):
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ManifestError(f"{self.clip_id}: resolution must be positive, got {w}x{h}")
        if self.frame_count <= 0:
            raise ManifestError(f"{self.clip_id}: frame count must be positive")
        if not self.fps > 0:
            raise ManifestError(f"{self.clip_id}: fps must be positive")
        if not isinstance(self.class_label, ClassLabel):
            object.__setattr__(self, "class_label", ClassLabel.parse(str(self.class_label)))


def load_manifest(path) -> list[ClipManifest]:
    """Read a corpus manifest CSV (``clip_id,path,class,width,height,frames,fps``)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected header") from None
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: bad header {header}, expected {','.join(MANIFEST_HEADER)}")
        clips = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}: row {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            rec = dict(zip(MANIFEST_HEADER, (c.strip() for c in row)))
            try:
                label = ClassLabel.parse(rec["class"])
            except ManifestError as exc:
                raise ManifestError(f"{path}: row {lineno}: field 'class': {exc}") from None
            values = {}
            for name, conv in (("width", int), ("height", int), ("frames", int), ("fps", float)):
                try:
                    values[name] = conv(rec[name])
                except ValueError:
                    raise ManifestError(f"{path}: row {lineno}: field {name!r}: cannot parse {rec[name]!r}") from None
            if not rec["clip_id"]:
                raise ManifestError(f"{path}: row {lineno}: field 'clip_id' is empty")
            try:
                clips.append(
                    ClipManifest(
                        clip_id=rec["clip_id"],
                        source_path=Path(rec["path"]),
                        class_label=label,
                        resolution=(values["width"], values["height"]),
                        frame_count=values["frames"],
                        fps=values["fps"],
                    )
                )
            except ManifestError as exc:
                raise ManifestError(f"{path}: row {lineno}: {exc}") from None
    return clips


def write_manifest(path, clips: Iterable[ClipManifest]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for c in clips:
            w.writerow([c.clip_id, str(c.source_path), c.class_label.value, c.resolution[0], c.resolution[1], c.frame_count, _fmt(c.fps)])


def default_bitrate_ladder() -> list[int]:
    """11 target bitrates from 256 kb/s to 7 Mb/s, equally spaced in log-rate."""
    rates = np.geomspace(LADDER_MIN, LADDER_MAX, LADDER_POINTS)
    ladder = [int(round(r)) for r in rates]
    ladder[0], ladder[-1] = LADDER_MIN, LADDER_MAX
    return ladder


@dataclass(frozen=True)
class RDPoint:
    target_bitrate: float
    achieved_bitrate: float
    quality: float
    k: float

    def __post_init__(self):
        if not self.achieved_bitrate > 0:
            raise CurveError(f"achieved bitrate must be > 0, got {self.achieved_bitrate}")
        if not math.isfinite(self.quality):
            raise CurveError(f"non-finite quality {self.quality!r}")


def cleanup_points(points: Iterable[RDPoint]) -> tuple[list[RDPoint], list[RDPoint]]:
    """Sort by achieved rate and drop points dominated by a cheaper point of equal or better quality.

    Returns ``(kept, dropped)``; kept qualities are strictly increasing.
    """
    ordered = sorted(points, key=lambda p: (p.achieved_bitrate, -p.quality))
    kept: list[RDPoint] = []
    dropped: list[RDPoint] = []
    for p in ordered:
        if kept and (p.achieved_bitrate == kept[-1].achieved_bitrate or p.quality <= kept[-1].quality):
            dropped.append(p)
        else:
            kept.append(p)
    for p in dropped:
        logger.info("dropping dominated RD point k=%g rate=%g quality=%g", p.k, p.achieved_bitrate, p.quality)
    return kept, dropped


@dataclass(frozen=True)
class RDCurve:
    k: float
    metric: QualityMetric
    points: tuple[RDPoint, ...]

    def __post_init__(self):
        pts = tuple(self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < MIN_CURVE_POINTS:
            raise CurveError(f"insufficient points: need at least {MIN_CURVE_POINTS}, got {len(pts)}")
        for p in pts:
            self.metric.check(p.quality)
        for a, b in zip(pts, pts[1:]):
            if not b.achieved_bitrate > a.achieved_bitrate:
                raise CurveError("achieved bitrates must be strictly increasing")
            if b.quality < a.quality:
                raise CurveError("quality must be non-decreasing in bitrate; run cleanup_points first")

    @classmethod
    def from_points(cls, points: Iterable[RDPoint], metric: QualityMetric, k: float) -> "RDCurve":
        kept, _ = cleanup_points(points)
        return cls(k=k, metric=metric, points=tuple(kept))

    @classmethod
    def from_arrays(cls, rates: Sequence[float], qualities: Sequence[float], metric: QualityMetric = PSNR, k: float = 1.0) -> "RDCurve":
        pts = tuple(RDPoint(float(r), float(r), float(q), k) for r, q in zip(rates, qualities))
        return cls(k=k, metric=metric, points=pts)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.achieved_bitrate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])


def read_curve_csv(path, metric: QualityMetric = PSNR, k: float = 1.0) -> RDCurve:
    """Read a curve file with header ``achieved_bitrate,quality``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"achieved_bitrate", "quality"} <= {f.strip() for f in reader.fieldnames}:
            raise CurveError(f"{path}: expected header achieved_bitrate,quality")
        rates, quals = [], []
        for lineno, row in enumerate(reader, start=2):
            row = {k_.strip(): v for k_, v in row.items()}
            try:
                rates.append(float(row["achieved_bitrate"]))
                quals.append(float(row["quality"]))
            except (TypeError, ValueError):
                raise CurveError(f"{path}: row {lineno}: non-numeric value") from None
    return RDCurve.from_arrays(rates, quals, metric=metric, k=k)


def write_curve_csv(path, curve: RDCurve) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("achieved_bitrate", "quality"))
        for p in curve.points:
            w.writerow((repr(float(p.achieved_bitrate)), repr(float(p.quality))))


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    k: float
    improvement: float
    best_so_far: float


@dataclass(frozen=True)
class OptimizerTrace:
    method: Method
    iterations: tuple[TraceEntry, ...] = ()

    def __post_init__(self):
        its = tuple(self.iterations)
        object.__setattr__(self, "iterations", its)
        for i, e in enumerate(its, start=1):
            if e.iteration != i:
                raise ValueError("trace iteration indices must run 1, 2, 3, ...")
        for a, b in zip(its, its[1:]):
            if b.best_so_far < a.best_so_far:
                raise ValueError("best-so-far must be non-decreasing")

    @property
    def best_so_far(self) -> list[float]:
        return [e.best_so_far for e in self.iterations]


def write_trace_csv(path, trace: OptimizerTrace) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for e in trace.iterations:
            w.writerow((e.iteration, repr(e.k), repr(e.improvement), repr(e.best_so_far)))


def read_trace_csv(path, method: Method) -> OptimizerTrace:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        entries = [
            TraceEntry(int(r["iteration"]), float(r["k"]), float(r["bd_rate_improvement_pct"]), float(r["best_so_far_pct"]))
            for r in reader
        ]
    return OptimizerTrace(method, tuple(entries))


@dataclass(frozen=True)
class ClipResult:
    clip_id: str
    class_label: ClassLabel
    method: Method
    k_star: float
    bd_rate_improvement: float
    bd_quality_delta: float
    objective_evaluations: int
    trace: OptimizerTrace | None = field(default=None, compare=False)

    def to_row(self) -> list[str]:
        return [
            self.clip_id,
            self.class_label.value,
            self.method.value,
            _fmt(self.k_star),
            _fmt(self.bd_rate_improvement),
            _fmt(self.bd_quality_delta),
            str(self.objective_evaluations),
        ]

    @classmethod
    def from_row(cls, row: dict) -> "ClipResult":
        return cls(
            clip_id=row["clip_id"],
            class_label=ClassLabel.parse(row["class"]),
            method=Method.parse(row["method"]),
            k_star=float(row["k_star"]),
            bd_rate_improvement=float(row["bd_rate_improvement_pct"]),
            bd_quality_delta=float(row["bd_quality_delta"]),
            objective_evaluations=int(row["objective_evaluations"]),
        )


def _fmt(x: float) -> str:
    s = f"{float(x):.6g}"
    return "0" if s == "-0" else s


def results_to_csv(results: Iterable[ClipResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    method_order = {m: i for i, m in enumerate(Method)}
    for r in sorted(results, key=lambda r: (r.clip_id, method_order[r.method])):
        w.writerow(r.to_row())
    return buf.getvalue()


def write_results_csv(path, results: Iterable[ClipResult]) -> None:
    Path(path).write_text(results_to_csv(results), encoding="utf-8")


def read_results_csv(path) -> list[ClipResult]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULTS_HEADER:
            raise ValueError(f"{path}: bad results header {reader.fieldnames}")
        return [ClipResult.from_row(r) for r in reader]
