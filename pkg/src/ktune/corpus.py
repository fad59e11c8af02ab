"""Synthetic corpora: manifests plus per-clip synthetic profiles."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from ktune.encoders import SyntheticProfile
from ktune.model import ClassLabel, ClipManifest

PROFILE_FIELDS = tuple(f.name for f in fields(SyntheticProfile))


def _rng(*parts) -> np.random.Generator:
    seed = int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:8], "big")
    return np.random.default_rng(seed)


def derive_profile(clip: ClipManifest) -> SyntheticProfile:
    """Deterministic profile from the clip id and resolution.

    Lower resolutions sit higher on the quality axis; k_star is log-uniform
    on [0.5, 2.5].
    """
    rng = _rng("profile", clip.clip_id, clip.resolution)
    small = clip.resolution[1] <= 480
    p0 = rng.uniform(39.0, 42.0) if small else rng.uniform(36.5, 40.0)
    return SyntheticProfile(
        P0=float(p0),
        R0=1e6,
        s=float(rng.uniform(2.0, 3.0)),
        c=float(rng.uniform(-0.08, 0.0)),
        k_star=float(math.exp(rng.uniform(math.log(0.5), math.log(2.5)))),
        w=float(rng.uniform(0.1, 0.6)),
        g=float(rng.uniform(0.2, 0.8)),
    )


def synthetic_corpus(n_720: int = 44, n_360: int = 33, seed: int = 0) -> tuple[list[ClipManifest], dict[str, SyntheticProfile]]:
    """Clips cycled over the 11 classes; the first clip's profile has k_star = 1."""
    classes = list(ClassLabel)
    clips, profiles = [], {}
    for i in range(n_720 + n_360):
        hd = i < n_720
        cls = classes[i % len(classes)]
        tag = hashlib.sha256(f"{seed}:{i}".encode()).hexdigest()[:4]
        res = (1280, 720) if hd else (640, 360)
        clip = ClipManifest(
            clip_id=f"{cls.value}_{'720P' if hd else '360P'}-{tag}",
            source_path=Path(f"clips/{cls.value}_{res[1]}p_{tag}.y4m"),
            class_label=cls,
            resolution=res,
            frame_count=150,
            fps=30.0,
        )
        prof = derive_profile(clip)
        if i == 0:
            prof = SyntheticProfile(**{**asdict(prof), "k_star": 1.0})
        clips.append(clip)
        profiles[clip.clip_id] = prof
    return clips, profiles


def write_profiles(path, profiles: dict[str, SyntheticProfile]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("clip_id",) + PROFILE_FIELDS)
        for cid in sorted(profiles):
            p = profiles[cid]
            w.writerow((cid,) + tuple(repr(getattr(p, f)) for f in PROFILE_FIELDS))


def read_profiles(path) -> dict[str, SyntheticProfile]:
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                kw = {f: float(row[f]) for f in PROFILE_FIELDS if row.get(f) not in (None, "")}
                out[row["clip_id"]] = SyntheticProfile(**kw)
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
    return out
