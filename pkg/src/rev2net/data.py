"""Synthetic two-domain sprite videos, the clip container and dataset manifests.

Class identity is carried by motion only:

    0 translate-left   1 translate-right   2 translate-up
    3 translate-down   4 expand            5 contract

Domain ``A`` draws circles or squares on a flat background at 1.0-1.5 px/frame.
Domain ``B`` draws triangles on a value-noise background at 1.5-2.5 px/frame with
per-frame brightness jitter. Each clip records its generator ground truth as
``true_velocity``: one ``(dx, dy, dr)`` row per frame transition (centroid
displacement and radius change, px/frame).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import container
from .errors import FormatError, InvalidInputError
from .seeding import derive_seed

CLASSES = ("translate-left", "translate-right", "translate-up", "translate-down", "expand", "contract")
DOMAINS = ("A", "B")
GENERATOR_VERSION = "sprites-v1"

_DIRECTIONS = {0: (-1.0, 0.0), 1: (1.0, 0.0), 2: (0.0, -1.0), 3: (0.0, 1.0)}
_SPEED = {"A": (1.0, 1.5), "B": (1.5, 2.5)}
_SHAPES = {"A": ("circle", "square"), "B": ("triangle",)}
_JITTER = {"A": 0.0, "B": 0.05}


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, 3, H, W] float32 in [0, 1]
    label: int
    domain: str
    clip_id: str
    true_velocity: np.ndarray | None = None  # [T-1, 3]: dx, dy, dr

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 2:
            raise InvalidInputError(f"clip {self.clip_id!r}: frames must be [T>=2, C, H, W], got {self.frames.shape}")
        if self.frames.min() < 0 or self.frames.max() > 1:
            raise InvalidInputError(f"clip {self.clip_id!r}: pixel values outside [0, 1]")
        if not 0 <= self.label < len(CLASSES):
            raise InvalidInputError(f"clip {self.clip_id!r}: label {self.label} outside [0, {len(CLASSES)})")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _sprite_coverage(shape: str, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of a sprite of "radius" r centred at (cx, cy)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        inside = r - np.hypot(dx, dy)
    elif shape == "square":
        inside = r - np.maximum(np.abs(dx), np.abs(dy))
    else:
        # equilateral triangle pointing up, circumradius r
        normals = [(0.0, 1.0), (np.sqrt(3) / 2, -0.5), (-np.sqrt(3) / 2, -0.5)]
        inside = np.min([r / 2 - (nx * dx + ny * dy) for nx, ny in normals], axis=0)
    return np.clip(inside + 0.5, 0.0, 1.0)


def _noise_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    bg = np.zeros((3, h, w))
    for cells, amp in ((4, 0.6), (8, 0.3), (16, 0.15)):
        grid = rng.random((3, cells + 1, cells + 1))
        bg += amp * ndimage.zoom(grid, (1, h / (cells + 1), w / (cells + 1)), order=1, mode="nearest")[:, :h, :w]
    bg = (bg - bg.min()) / (bg.max() - bg.min() + 1e-12)
    return 0.15 + 0.7 * bg


def _distinct_colour(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    ref = background.reshape(3, -1).mean(axis=1)
    for _ in range(100):
        c = rng.uniform(0.05, 0.95, size=3)
        if np.abs(c - ref).max() >= 0.4:
            return c
    return np.where(ref > 0.5, 0.05, 0.95)


def synth_clip(label: int, domain: str, seed: int, frames: int = 8, height: int = 32, width: int = 32,
               speed: float | None = None, clip_id: str | None = None) -> VideoClip:
    """Render one clip whose motion follows ``label``; fully determined by the arguments.

    ``speed`` overrides the domain's speed draw (px/frame; radius rate is half of it).
    """
    if label not in range(len(CLASSES)):
        raise InvalidInputError(f"unknown class {label!r}; expected 0..{len(CLASSES) - 1}")
    if domain not in DOMAINS:
        raise InvalidInputError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    if frames < 2:
        raise InvalidInputError("a clip needs at least 2 frames")
    rng = np.random.default_rng(derive_seed(seed, "clip", label, domain))
    lo, hi = _SPEED[domain]
    spd = float(rng.uniform(lo, hi)) if speed is None else float(speed)
    shape = _SHAPES[domain][int(rng.integers(len(_SHAPES[domain])))]
    steps = frames - 1

    if domain == "A":
        background = np.broadcast_to(rng.uniform(0.1, 0.9, size=(3, 1, 1)), (3, height, width)).copy()
    else:
        background = _noise_background(rng, height, width)
    colour = _distinct_colour(rng, background)

    if label in _DIRECTIONS:
        r = float(rng.uniform(4.0, 6.0))
        ux, uy = _DIRECTIONS[label]
        travel = spd * steps
        margin = r + 1.0

        def start(extent, direction):
            if direction == 0:
                return float(rng.uniform(margin, extent - 1 - margin))
            lo_, hi_ = margin, max(margin, extent - 1 - margin - travel)
            s = float(rng.uniform(lo_, hi_))
            return s if direction > 0 else extent - 1 - s

        cx, cy = start(width, ux), start(height, uy)
        centres = [(cx + ux * spd * t, cy + uy * spd * t) for t in range(frames)]
        radii = [r] * frames
    else:
        rate = 0.5 * spd * (1 if label == 4 else -1)
        r_small = 3.0
        r0 = r_small if rate > 0 else r_small - rate * steps
        cx = float(rng.uniform(-1.5, 1.5)) + (width - 1) / 2
        cy = float(rng.uniform(-1.5, 1.5)) + (height - 1) / 2
        centres = [(cx, cy)] * frames
        radii = [r0 + rate * t for t in range(frames)]

    out = np.empty((frames, 3, height, width), dtype=np.float32)
    for t in range(frames):
        cov = _sprite_coverage(shape, centres[t][0], centres[t][1], radii[t], height, width)
        # radial shading that travels with the sprite gives it interior texture
        yy, xx = np.mgrid[0:height, 0:width]
        dist = np.hypot(xx - centres[t][0], yy - centres[t][1]) / max(radii[t], 1.0)
        shade = colour[:, None, None] * (1.0 - 0.25 * np.clip(dist, 0, 1)[None])
        img = background * (1 - cov[None]) + shade * cov[None]
        if _JITTER[domain]:
            img = img + rng.uniform(-_JITTER[domain], _JITTER[domain])
        out[t] = np.clip(img, 0.0, 1.0)

    velocity = np.array(
        [(centres[t + 1][0] - centres[t][0], centres[t + 1][1] - centres[t][1], radii[t + 1] - radii[t])
         for t in range(steps)]
    )
    cid = clip_id or f"{domain}-c{label}-s{seed}"
    return VideoClip(out, int(label), domain, cid, velocity)


def class_from_velocity(velocity: np.ndarray) -> int:
    """Recover the motion class from generator ground truth alone."""
    v = np.asarray(velocity).mean(axis=0)
    dx, dy, dr = v
    if abs(dr) > max(abs(dx), abs(dy)):
        return 4 if dr > 0 else 5
    if abs(dx) >= abs(dy):
        return 1 if dx > 0 else 0
    return 3 if dy > 0 else 2


def reversed_frames(clip) -> np.ndarray:
    """Frames in reverse temporal order: output[t] == input[T-1-t]."""
    frames = clip.frames if hasattr(clip, "frames") else np.asarray(clip)
    return np.ascontiguousarray(frames[::-1])


# -- clip container ----------------------------------------------------------------

def write_clip(path, clip: VideoClip) -> Path:
    meta = {
        "kind": "clip",
        "clip_id": clip.clip_id,
        "label": int(clip.label),
        "domain": clip.domain,
        "true_velocity": None if clip.true_velocity is None else np.asarray(clip.true_velocity).tolist(),
    }
    return container.write(path, clip.frames.astype(np.float32), meta)


def read_clip(path) -> VideoClip:
    frames, meta = container.read(path)
    for key in ("clip_id", "label", "domain"):
        if key not in meta:
            raise FormatError("metadata", f"missing {key!r}", path)
    if frames.ndim != 4:
        raise FormatError("rank", f"clip payload must be rank 4, got {frames.ndim}", path)
    vel = meta.get("true_velocity")
    return VideoClip(frames, int(meta["label"]), meta["domain"], meta["clip_id"],
                     None if vel is None else np.asarray(vel, dtype=np.float64))


# -- manifests ---------------------------------------------------------------------

@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    label: int
    domain: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    version: str = GENERATOR_VERSION
    root: Path = field(default_factory=Path)

    def select(self, split: str | None = None, domain: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (split is None or e.split == split) and (domain is None or e.domain == domain)]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load_clips(self, split: str | None = None, domain: str | None = None) -> list[VideoClip]:
        return [read_clip(self.resolve(e)) for e in self.select(split, domain)]

    @property
    def domains(self) -> list[str]:
        return sorted({e.domain for e in self.entries})

    def save(self, path) -> Path:
        path = Path(path)
        lines = [json.dumps({"clip_id": e.clip_id, "path": e.path, "label": e.label, "domain": e.domain,
                             "split": e.split, "seed": self.seed, "generator": self.version}, sort_keys=True)
                 for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries, seed, version = [], None, GENERATOR_VERSION
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(ManifestEntry(rec["clip_id"], rec["path"], int(rec["label"]), rec["domain"], rec["split"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError("manifest", f"line {n}: {exc}", path) from None
            seed = rec.get("seed", seed)
            version = rec.get("generator", version)
        ids = [e.clip_id for e in entries]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest", "duplicate clip ids", path)
        return cls(entries, seed if seed is not None else 0, version, path.parent)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.clip_id}|{e.label}|{e.domain}|{e.split}|".encode())
            h.update(self.resolve(e).read_bytes())
        return h.hexdigest()


def gen_dataset(n_per_cell: int, seed: int, out_dir, domains=DOMAINS, **clip_kwargs) -> DatasetManifest:
    """Write a balanced dataset (classes x domains x n) plus ``manifest.jsonl`` under ``out_dir``.

    Each (class, domain) cell is split 80/20 into train/test by a seeded shuffle.
    """
    if n_per_cell < 2:
        raise InvalidInputError("need at least 2 clips per (class, domain) cell")
    out_dir = Path(out_dir)
    try:
        (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir / 'clips'}: {exc}") from exc
    n_test = max(1, int(round(0.2 * n_per_cell)))
    entries = []
    for domain in domains:
        for label in range(len(CLASSES)):
            order = np.random.default_rng(derive_seed(seed, "split", domain, label)).permutation(n_per_cell)
            test_idx = set(order[:n_test].tolist())
            for i in range(n_per_cell):
                clip_id = f"{domain}-c{label}-{i:04d}"
                clip = synth_clip(label, domain, derive_seed(seed, "clip-index", domain, label, i),
                                  clip_id=clip_id, **clip_kwargs)
                rel = f"clips/{clip_id}.clip.bin"
                write_clip(out_dir / rel, clip)
                entries.append(ManifestEntry(clip_id, rel, label, domain, "test" if i in test_idx else "train"))
    manifest = DatasetManifest(entries, seed, GENERATOR_VERSION, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
