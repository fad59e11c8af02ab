"""Encoder backends producing RD points for (clip, k, target bitrate, metric).

Two backends share one contract: :class:`SyntheticEncoder`, a deterministic
closed-form model used for tests and desk-scale runs, and
:class:`SubprocessEncoder`, which drives a k-aware encoder binary through a
command template and parses its CSV log.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import shlex
import shutil
import subprocess
import tempfile
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Protocol

from ktune.errors import EncodeError, LogParseError
from ktune.model import LADDER_MAX, LADDER_MIN, ClipManifest, MetricKind, QualityMetric, RDPoint


class FrameType(str, Enum):
    I = "I"
    P = "P"
    B = "B"


def lambda_default(frame_type: FrameType | str, q: int, codec: str = "hevc") -> float:
    """Default Lagrange multiplier for a quantiser value.

    ``codec="hevc"`` (also used for H.264) gives the I/P/B relations over
    QP 0-51; ``codec="h263"`` gives ``0.85 * Q**2`` over Q 1-31 and ignores
    the frame type.
    """
    if codec == "h263":
        if not 1 <= q <= 31:
            raise ValueError(f"H.263 quantiser out of range 1-31: {q}")
        return 0.85 * q * q
    if codec not in ("hevc", "h264"):
        raise ValueError(f"unknown codec generation {codec!r}")
    if not 0 <= q <= 51:
        raise ValueError(f"QP out of range 0-51: {q}")
    ft = FrameType(frame_type)
    scale = 2.0 ** ((q - 12) / 3.0)
    if ft is FrameType.I:
        return 0.57 * scale
    if ft is FrameType.P:
        return 0.85 * scale
    return 0.68 * max(2.0, min(4.0, (q - 12) / 6.0)) * scale


@dataclass(frozen=True)
class EncodeRequest:
    clip: ClipManifest
    k: float
    target_bitrate: float
    metric: QualityMetric

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be > 0, got {self.k}")
        if not self.target_bitrate > 0:
            raise ValueError(f"target bitrate must be > 0, got {self.target_bitrate}")


class Encoder(Protocol):
    fingerprint: str

    def encode(self, request: EncodeRequest) -> RDPoint: ...


# -- synthetic model --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticProfile:
    """Closed-form RD behaviour of one clip.

    quality(R, k) = P0 + s*x + c*x**2 - w*|ln(k/k_star)|**power * (1 + g*u(R)),
    with x = ln(R/R0) and u(R) = max(0, ln(Rmax/R) / ln(Rmax/Rmin)).
    ``power`` is 2 for the standard model; values below 1 give a cusp at
    k_star that slows direct search.
    """

    P0: float
    R0: float
    s: float
    c: float
    k_star: float
    w: float
    g: float
    power: float = 2.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("slope s must be > 0")
        if self.w < 0 or self.g < 0:
            raise ValueError("w and g must be >= 0")
        if not self.k_star > 0 or not self.R0 > 0 or not self.power > 0:
            raise ValueError("k_star, R0 and power must be > 0")
        for r in (LADDER_MIN, LADDER_MAX):
            x = math.log(r / self.R0)
            if not self.s + 2.0 * self.c * x > 0:
                raise ValueError(f"quality not increasing in rate at R={r} (s + 2c ln(R/R0) <= 0)")

    def penalty(self, k: float) -> float:
        return self.w * abs(math.log(k / self.k_star)) ** self.power

    def quality(self, rate: float, k: float) -> float:
        x = math.log(rate / self.R0)
        u = max(0.0, math.log(LADDER_MAX / rate) / math.log(LADDER_MAX / LADDER_MIN))
        return self.P0 + self.s * x + self.c * x * x - self.penalty(k) * (1.0 + self.g * u)


PROFILE_A = SyntheticProfile(P0=38.0, R0=1e6, s=2.2, c=-0.05, k_star=1.5, w=0.8, g=0.5)


def psnr_to_ssim(quality_db: float) -> float:
    """Map the synthetic dB scale onto SSIM (38 dB -> ~0.984)."""
    return 1.0 - 10.0 ** (-(quality_db - 20.0) / 10.0)


def _unit_hash(*parts) -> float:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64 * 2.0 - 1.0


class SyntheticEncoder:
    """Deterministic encoder double; achieved bitrate equals target.

    Profiles come from ``profiles`` by clip id, else from ``fallback(clip)``.
    """

    def __init__(
        self,
        profiles: Mapping[str, SyntheticProfile] | None = None,
        fallback: Callable[[ClipManifest], SyntheticProfile] | None = None,
        noise: float = 0.0,
        seed: int = 0,
    ):
        self.profiles = dict(profiles or {})
        self.fallback = fallback
        self.noise = noise
        self.seed = seed
        self.calls = 0
        self._lock = threading.Lock()

    def profile_for(self, clip: ClipManifest) -> SyntheticProfile:
        prof = self.profiles.get(clip.clip_id)
        if prof is None and self.fallback is not None:
            prof = self.fallback(clip)
        if prof is None:
            raise EncodeError(f"no synthetic profile for clip {clip.clip_id!r}")
        return prof

    @property
    def fingerprint(self) -> str:
        desc = {
            "profiles": {cid: asdict(p) for cid, p in sorted(self.profiles.items())},
            "fallback": None if self.fallback is None else f"{self.fallback.__module__}.{self.fallback.__qualname__}",
            "noise": self.noise,
            "seed": self.seed,
        }
        blob = json.dumps(desc, sort_keys=True)
        return "synthetic-" + hashlib.sha256(blob.encode()).hexdigest()[:16]

    def encode(self, request: EncodeRequest) -> RDPoint:
        with self._lock:
            self.calls += 1
        prof = self.profile_for(request.clip)
        rate = float(request.target_bitrate)
        q = prof.quality(rate, request.k)
        if self.noise:
            q += self.noise * _unit_hash(self.seed, request.clip.clip_id, round(request.k, 6), rate)
        if request.metric.kind is MetricKind.SSIM:
            q = psnr_to_ssim(q)
        return RDPoint(target_bitrate=rate, achieved_bitrate=rate, quality=q, k=request.k)


# -- subprocess adapter -----------------------------------------------------


@dataclass(frozen=True)
class LogFieldMap:
    """Column names in the encoder CSV log; each entry lists accepted aliases."""

    bitrate: tuple[str, ...] = ("Bitrate",)
    psnr: tuple[str, ...] = ("PSNR", "Global PSNR")
    ssim: tuple[str, ...] = ("SSIM",)
    bitrate_scale: float = 1000.0  # log reports kb/s
    summary_row: int = -1

    @classmethod
    def from_dict(cls, d: Mapping) -> "LogFieldMap":
        def names(v):
            return (v,) if isinstance(v, str) else tuple(v)

        kw = {}
        for key in ("bitrate", "psnr", "ssim"):
            if key in d:
                kw[key] = names(d[key])
        if "bitrate_scale" in d:
            kw["bitrate_scale"] = float(d["bitrate_scale"])
        if "summary_row" in d:
            kw["summary_row"] = int(d["summary_row"])
        return cls(**kw)


X265_TEMPLATE = (
    "x265 --input {input} --bitrate {bitrate} --lambda-scale {k} {metric_flags} "
    "--csv-log-level 2 --csv {log} --output {output}"
)

METRIC_FLAGS = {MetricKind.PSNR: "--tune psnr --psnr", MetricKind.SSIM: "--tune ssim --ssim"}


def parse_encode_log(text: str, metric: QualityMetric, fields: LogFieldMap = LogFieldMap()) -> tuple[float, float]:
    """Extract (achieved bits/s, quality) from the summary row of a CSV encode log."""
    rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
    if len(rows) < 2:
        raise LogParseError("log has no data rows")
    row_index = fields.summary_row if fields.summary_row < 0 else fields.summary_row + 1
    try:
        summary = rows[row_index]
    except IndexError:
        raise LogParseError(f"log has no summary row {fields.summary_row}") from None
    row_index %= len(rows)
    lineno = row_index + 1
    # per-frame and summary sections carry separate headers; use the nearest one above
    header = [h.strip() for h in rows[0]]
    for r in reversed(rows[:row_index]):
        names = [h.strip() for h in r]
        if any(a in names for a in fields.bitrate):
            header = names
            break

    def cell(aliases: tuple[str, ...]) -> float:
        for name in aliases:
            if name in header:
                col = header.index(name)
                break
        else:
            raise LogParseError(f"missing column {aliases[0]!r} (accepted: {', '.join(aliases)})")
        try:
            return float(summary[col].strip())
        except (IndexError, ValueError):
            raw = summary[col] if col < len(summary) else ""
            raise LogParseError(f"non-numeric cell at row {lineno}, column {header[col]!r}: {raw!r}") from None

    rate = cell(fields.bitrate) * fields.bitrate_scale
    quality = cell(fields.psnr if metric.kind is MetricKind.PSNR else fields.ssim)
    return rate, quality


class SubprocessEncoder:
    """Runs an external k-aware encoder once per request.

    ``template`` is formatted with ``{input} {bitrate} {k} {metric_flags}
    {output} {log}``; ``{bitrate}`` is in kb/s, as x265 expects.
    """

    def __init__(
        self,
        template: str = X265_TEMPLATE,
        *,
        version: str = "",
        fields: LogFieldMap = LogFieldMap(),
        timeout: float = 1800.0,
        parallelism: int = 1,
        workdir: str | Path | None = None,
        keep_outputs: bool = False,
    ):
        self.template = template
        self.version = version
        self.fields = fields
        self.timeout = timeout
        self.workdir = Path(workdir) if workdir else None
        self.keep_outputs = keep_outputs
        self._slots = threading.BoundedSemaphore(max(1, parallelism))
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def fingerprint(self) -> str:
        blob = json.dumps({"template": self.template, "version": self.version, "fields": asdict(self.fields)}, sort_keys=True)
        return "subprocess-" + hashlib.sha256(blob.encode()).hexdigest()[:16]

    def command(self, request: EncodeRequest, output: Path, log: Path) -> list[str]:
        text = self.template.format(
            input=shlex.quote(str(request.clip.source_path)),
            bitrate=int(round(request.target_bitrate / 1000.0)),
            k=f"{request.k:.6f}",
            metric_flags=METRIC_FLAGS[request.metric.kind],
            output=shlex.quote(str(output)),
            log=shlex.quote(str(log)),
        )
        return shlex.split(text)

    def encode(self, request: EncodeRequest) -> RDPoint:
        if not Path(request.clip.source_path).exists():
            raise EncodeError(f"clip file not found: {request.clip.source_path}")
        base = self.workdir
        if base is not None:
            base.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix="ktune-", dir=base))
        stem = f"{request.clip.clip_id}_k{request.k:.6f}_{int(request.target_bitrate)}"
        output, log = tmp / f"{stem}.mp4", tmp / f"{stem}.csv"
        cmd = self.command(request, output, log)
        try:
            with self._slots:
                with self._lock:
                    self.calls += 1
                try:
                    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
                except subprocess.TimeoutExpired:
                    raise EncodeError(f"encode timed out after {self.timeout:g}s: {shlex.join(cmd)}") from None
                except OSError as exc:
                    raise EncodeError(f"cannot run encoder: {exc}") from None
            if proc.returncode != 0:
                raise EncodeError(f"encoder exited with status {proc.returncode}: {proc.stderr.strip()}")
            if not log.exists():
                raise LogParseError(f"encoder did not write log {log}")
            rate, quality = parse_encode_log(log.read_text(encoding="utf-8", errors="replace"), request.metric, self.fields)
        finally:
            if not self.keep_outputs:
                shutil.rmtree(tmp, ignore_errors=True)
        return RDPoint(target_bitrate=float(request.target_bitrate), achieved_bitrate=rate, quality=quality, k=request.k)
