"""Command-line entry point: ``ktune {optimize,bdrate,report,encode-probe,synth-corpus}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ktune import bd
from ktune.errors import KtuneError
from ktune.model import (
    ClassLabel,
    ClipManifest,
    Method,
    MetricKind,
    QualityMetric,
    load_manifest,
    read_curve_csv,
    write_manifest,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _methods(value: str) -> list[str]:
    if value == "all":
        return [m.value for m in Method]
    try:
        return [Method.parse(v).value for v in value.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ladder(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ladder {value!r}") from None


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["synthetic", "subprocess"], help="encoder backend (default synthetic)")
    p.add_argument("--template", help="command template for the subprocess backend; placeholders {input} {bitrate} {k} {metric_flags} {output} {log}")
    p.add_argument("--encoder-version", help="version string folded into the cache fingerprint")
    p.add_argument("--timeout", type=float, help="per-encode timeout in seconds (default 1800)")
    p.add_argument("--field-map", help="JSON file mapping log fields: bitrate, psnr, ssim, bitrate_scale, summary_row")
    p.add_argument("--profiles", help="synthetic profiles CSV (default: derived from clip ids)")
    p.add_argument("--noise", type=float, help="synthetic quality noise amplitude in dB (default 0)")
    p.add_argument("--metric", choices=["psnr", "ssim"], help="quality metric (default psnr)")
    p.add_argument("--ssim-db", action="store_true", default=None, help="fit SSIM on the -10*log10(1-SSIM) scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ktune", description="Per-clip Lagrange multiplier tuning by direct BD-Rate search.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="optimise k for every clip in a manifest")
    p.add_argument("--manifest", help="corpus manifest CSV")
    p.add_argument("--method", type=_methods, help="multires, golden, brent, a comma list, or all (default all)")
    p.add_argument("--out", help="run directory (default run)")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("--parallelism", type=int, help="clip and encode concurrency (default 1)")
    p.add_argument("--cache-dir", help="encode cache directory (default <out>/cache)")
    p.add_argument("--probe-quality", type=float, help="fixed quality for bitrate savings (default 40)")
    p.add_argument("--ladder", type=_ladder, help="comma-separated target bitrates in b/s")
    p.add_argument("--max-evaluations", type=int, help="objective evaluation cap (default 15)")
    p.add_argument("--tolerance", type=float, help="stopping tolerance in BD-Rate percentage points (default 0.02)")
    p.add_argument("--k-min", type=float, help="lower end of the k domain (default 0.2)")
    p.add_argument("--k-max", type=float, help="upper end of the k domain (default 3.0)")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("bdrate", help="BD-Rate between two curve CSVs (achieved_bitrate,quality)")
    p.add_argument("baseline")
    p.add_argument("candidate")
    p.add_argument("--metric", choices=["psnr", "ssim"], default="psnr")
    p.add_argument("--ssim-db", action="store_true")
    p.add_argument("--probe-quality", type=float, help="also print bitrate savings at this quality")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("report", help="write tables, CDFs, convergence traces and SVG figures for a run")
    p.add_argument("run_dir")
    p.add_argument("--out", help="report directory (default <run_dir>/report)")
    p.add_argument("--no-rd-plots", action="store_true", help="skip per-clip RD comparison figures")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("encode-probe", help="run one encode and print the parsed RD point")
    p.add_argument("--manifest", help="manifest to take the clip from")
    p.add_argument("--clip-id", help="clip id within the manifest (default first row)")
    p.add_argument("--input", help="raw clip path when no manifest is given")
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--bitrate", type=float, default=1_000_000, help="target bitrate in b/s")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_encode_probe)

    p = sub.add_parser("synth-corpus", help="write a synthetic manifest and profile table")
    p.add_argument("--out", required=True, help="manifest CSV to write")
    p.add_argument("--profiles", required=True, help="profiles CSV to write")
    p.add_argument("--n720", type=int, default=44)
    p.add_argument("--n360", type=int, default=33)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_corpus)
    return parser


# -- config resolution ------------------------------------------------------


def resolve_config(args) -> dict:
    """Built-in defaults < config file < flags."""
    from ktune.pipeline import RunConfig

    cfg = RunConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text(encoding="utf-8"))
        search = file_cfg.pop("search", {})
        cfg.update(file_cfg)
        cfg["search"].update(search)
    flag_map = {
        "manifest": "manifest",
        "method": "methods",
        "out": "out_dir",
        "parallelism": "parallelism",
        "cache_dir": "cache_dir",
        "probe_quality": "probe_quality",
        "ladder": "ladder",
        "backend": "backend",
        "template": "template",
        "encoder_version": "encoder_version",
        "timeout": "timeout",
        "profiles": "profiles",
        "noise": "noise",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    for flag in ("max_evaluations", "tolerance", "k_min", "k_max"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg["search"][flag] = val
    if getattr(args, "metric", None):
        cfg["metric"] = dict(cfg["metric"], kind=args.metric.upper())
    if getattr(args, "ssim_db", None):
        cfg["metric"] = dict(cfg["metric"], ssim_db=True)
    return cfg


def make_backend(cfg, field_map_path=None):
    from ktune.corpus import derive_profile, read_profiles
    from ktune.encoders import X265_TEMPLATE, LogFieldMap, SubprocessEncoder, SyntheticEncoder

    if cfg.backend == "synthetic":
        table = {}
        if cfg.profiles:
            path = Path(cfg.profiles)
            if not path.exists():
                raise UsageError(f"profiles file not found: {path}")
            table = read_profiles(path)
        return SyntheticEncoder(table, fallback=derive_profile, noise=cfg.noise)
    fields = LogFieldMap()
    if field_map_path:
        fields = LogFieldMap.from_dict(json.loads(Path(field_map_path).read_text(encoding="utf-8")))
    return SubprocessEncoder(
        cfg.template or X265_TEMPLATE,
        version=cfg.encoder_version,
        fields=fields,
        timeout=cfg.timeout,
        parallelism=cfg.parallelism,
    )


# -- subcommands ------------------------------------------------------------


def cmd_optimize(args) -> int:
    from ktune.pipeline import RunConfig, run_batch
    from ktune.reporting import best_method_per_class, per_class_summary

    try:
        cfg = RunConfig.from_dict(resolve_config(args))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not cfg.manifest:
        raise UsageError("--manifest is required")
    if not Path(cfg.manifest).exists():
        raise UsageError(f"manifest not found: {cfg.manifest}")
    clips = load_manifest(cfg.manifest)
    backend = make_backend(cfg, args.field_map)

    def progress(oc):
        r = oc.result
        print(f"{r.clip_id:<28} {r.method.value:<14} k*={r.k_star:<8.4g} improvement={r.bd_rate_improvement:8.3f}%  evals={r.objective_evaluations}", flush=True)

    summary = run_batch(cfg, backend, clips, progress=progress)
    if summary.results:
        rows = per_class_summary(summary.results)
        print()
        print(f"{'class':<16}{'method':<15}{'n':>4}{'mean %':>10}{'best %':>10}")
        for s in rows:
            print(f"{s.class_label.value:<16}{s.method.value:<15}{s.n:>4}{s.mean_improvement:>10.3f}{s.best_improvement:>10.3f}")
        best = best_method_per_class(rows)
        print()
        for cls, s in best.items():
            print(f"best {cls.value}: {s.method.value} {s.best_improvement:.3f}% ({s.best_clip})")
    print(f"\n{len(summary.results)} result(s), {len(summary.failures)} failure(s), {summary.backend_calls} encode(s); wrote {summary.out_dir}")
    for clip_id, method, err in summary.failures:
        print(f"FAILED {clip_id} {method}: {err}", file=sys.stderr)
    return EXIT_OK if summary.ok else EXIT_FAIL


def cmd_bdrate(args) -> int:
    metric = QualityMetric(MetricKind(args.metric.upper()), args.ssim_db)
    for p in (args.baseline, args.candidate):
        if not Path(p).exists():
            raise UsageError(f"curve file not found: {p}")
    try:
        base = read_curve_csv(args.baseline, metric, 1.0)
        cand = read_curve_csv(args.candidate, metric, 1.0)
        res = bd.bd_rate(base, cand)
    except KtuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"bd_rate_improvement: {res.bd_rate_improvement:.6f}%")
    print(f"bd_quality_delta: {res.bd_quality_delta:.6f}")
    print(f"overlap: {res.overlap[0]:.6f} {res.overlap[1]:.6f}")
    if args.probe_quality is not None:
        try:
            print(f"savings_at_{args.probe_quality:g}: {bd.savings_at_quality(base, cand, args.probe_quality):.6f}%")
        except KtuneError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
    return EXIT_OK


def cmd_report(args) -> int:
    from ktune.reporting import generate_report

    try:
        out = generate_report(args.run_dir, args.out, rd_plots=not args.no_rd_plots)
    except (FileNotFoundError, ValueError, KtuneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for name, c in sorted(out.cdfs.items()):
        print(
            f"{name}: {c.fraction_at_most(5.0) * 100:.1f}% of {c.n_included} clip(s) save <= 5% at {c.probe_quality:g}"
            f" ({c.n_excluded} outside range)"
        )
    print(f"wrote {len(out.files)} file(s) to {out.out_dir}")
    return EXIT_OK


def cmd_encode_probe(args) -> int:
    from ktune.encoders import EncodeRequest
    from ktune.pipeline import RunConfig

    cfg = RunConfig.from_dict(resolve_config(args))
    if args.manifest:
        if not Path(args.manifest).exists():
            raise UsageError(f"manifest not found: {args.manifest}")
        clips = load_manifest(args.manifest)
        if args.clip_id:
            clips = [c for c in clips if c.clip_id == args.clip_id]
        if not clips:
            raise UsageError(f"clip {args.clip_id!r} not in manifest")
        clip = clips[0]
    elif args.input:
        clip = ClipManifest(Path(args.input).stem, Path(args.input), ClassLabel.VLOG, (1280, 720))
    else:
        raise UsageError("need --manifest or --input")
    backend = make_backend(cfg, args.field_map)
    try:
        pt = backend.encode(EncodeRequest(clip, args.k, args.bitrate, cfg.metric))
    except KtuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"clip_id={clip.clip_id} k={pt.k:g} target_bitrate={pt.target_bitrate:g} achieved_bitrate={pt.achieved_bitrate:g} quality={pt.quality:.6g}")
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    from ktune.corpus import synthetic_corpus, write_profiles

    clips, profiles = synthetic_corpus(args.n720, args.n360, args.seed)
    write_manifest(args.out, clips)
    write_profiles(args.profiles, profiles)
    print(f"wrote {len(clips)} clip(s) to {args.out} and {args.profiles}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ktune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KtuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
