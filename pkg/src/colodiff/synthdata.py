"""Deterministic class-conditional toy videos.

Each clip is a textured background with one moving object.  Classes
differ in object shape, palette, texture band and motion law, standing in
for disease categories.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .numerics import cdt

SHAPES = ("disc", "ring", "blob")


@dataclass(frozen=True)
class ToyClassSpec:
    class_id: int
    shape: str
    radius: tuple[float, float]  # object radius range in pixels
    texture_band: tuple[float, float]  # background frequency band, cycles per frame width
    speed: tuple[float, float]  # drift speed range, pixels per frame
    oscillation: float  # amplitude in pixels of the perpendicular wobble
    period: float  # wobble period in frames
    background: tuple[float, float, float]
    foreground: tuple[float, float, float]
    texture_amplitude: float = 0.04
    name: str = ""

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape family {self.shape!r}")

    def max_step(self) -> float:
        """Upper bound on per-frame object displacement."""
        return self.speed[1] + 2 * math.pi * self.oscillation / self.period

    @classmethod
    def from_dict(cls, d: dict) -> "ToyClassSpec":
        d = dict(d)
        for key in ("radius", "texture_band", "speed", "background", "foreground"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def default_classes() -> list[ToyClassSpec]:
    """Three classes loosely shaped after colitis / polyp / adenoma."""
    return [
        ToyClassSpec(0, "disc", (4.5, 6.0), (1.0, 3.0), (0.8, 1.4), 0.0, 8.0,
                     (0.55, 0.30, 0.28), (0.92, 0.62, 0.45), name="colitis-like"),
        ToyClassSpec(1, "ring", (5.5, 7.0), (2.0, 4.0), (0.6, 1.1), 1.0, 6.0,
                     (0.40, 0.22, 0.30), (0.95, 0.85, 0.70), name="polyp-like"),
        ToyClassSpec(2, "blob", (5.0, 6.5), (3.0, 5.0), (1.0, 1.6), 0.6, 5.0,
                     (0.30, 0.25, 0.40), (0.55, 0.80, 0.88), name="adenoma-like"),
    ]


def _band_noise(rng: np.random.Generator, size: int, band: tuple[float, float]) -> np.ndarray:
    """Zero-mean, unit-peak noise restricted to a radial frequency band."""
    white = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size) * size
    radius = np.hypot(f[:, None], f[None, :])
    mask = (radius >= band[0]) & (radius <= band[1])
    field_ = np.real(np.fft.ifft2(np.fft.fft2(white) * mask))
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def _coverage(spec: ToyClassSpec, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
              r: float, aspect: float, angle: float) -> np.ndarray:
    """Soft (anti-aliased) object mask in [0, 1]."""
    dy, dx = yy - cy, xx - cx
    if spec.shape == "blob":
        ca, sa = math.cos(angle), math.sin(angle)
        u = (dx * ca + dy * sa) / aspect
        v = (-dx * sa + dy * ca) * aspect
        d = np.hypot(u, v)
        return 1.0 / (1.0 + np.exp((d - r) / 0.7))
    d = np.hypot(dx, dy)
    outer = 1.0 / (1.0 + np.exp((d - r) / 0.6))
    if spec.shape == "ring":
        inner = 1.0 / (1.0 + np.exp((d - 0.5 * r) / 0.6))
        return outer - inner
    return outer


def _reflect(p: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2 * span)
    return lo + (q if q <= span else 2 * span - q)


def render_clip(spec: ToyClassSpec, frames: int, size: int, rng: np.random.Generator):
    """Render one clip -> (video [F, 3, S, S] float32 in [0,1], centers [F, 2])."""
    r = rng.uniform(*spec.radius)
    margin = r + 1.0
    y0, x0 = rng.uniform(margin, size - margin, size=2)
    heading = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(*spec.speed)
    phase = rng.uniform(0, 2 * math.pi)
    aspect = rng.uniform(1.2, 1.5)
    angle = rng.uniform(0, math.pi)
    tint = rng.uniform(-0.04, 0.04, size=3)
    tex = _band_noise(rng, size, spec.texture_band) * spec.texture_amplitude

    vy, vx = math.sin(heading) * speed, math.cos(heading) * speed
    py, px = -math.cos(heading), math.sin(heading)  # perpendicular unit vector
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    bg = np.asarray(spec.background)[:, None, None] + tint[:, None, None] + tex[None]
    fg = np.asarray(spec.foreground)[:, None, None] + tint[:, None, None]
    video = np.empty((frames, 3, size, size), dtype=np.float32)
    centers = np.empty((frames, 2), dtype=np.float32)
    for f in range(frames):
        wob = spec.oscillation * math.sin(2 * math.pi * f / spec.period + phase)
        wob0 = spec.oscillation * math.sin(phase)
        cy = _reflect(y0 + vy * f + py * (wob - wob0), margin, size - margin)
        cx = _reflect(x0 + vx * f + px * (wob - wob0), margin, size - margin)
        m = _coverage(spec, yy, xx, cy, cx, r, aspect, angle)
        video[f] = np.clip(bg * (1 - m) + fg * m, 0.0, 1.0)
        centers[f] = (cy, cx)
    return video, centers


@dataclass
class SyntheticDataset:
    videos: np.ndarray  # [N, F, 3, S, S]
    labels: np.ndarray  # [N]
    centers: np.ndarray  # [N, F, 2] object centers (y, x)
    clip_seeds: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def size(self) -> int:
        return int(self.videos.shape[-1])

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset(self.videos[idx], self.labels[idx], self.centers[idx],
                                [self.clip_seeds[i] for i in idx], self.classes, self.seed)

    def split(self, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Class-stratified (train_idx, val_idx), fixed by ``seed``."""
        rng = np.random.default_rng([seed, 7919])
        train, val = [], []
        for c in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == c)
            idx = idx[rng.permutation(idx.size)]
            n_val = max(1, int(round(val_fraction * idx.size)))
            val.extend(idx[:n_val].tolist())
            train.extend(idx[n_val:].tolist())
        return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cdt.save(directory / "videos.cdt", self.videos)
        cdt.save(directory / "centers.cdt", self.centers)
        index = {
            "format": "colodiff-synthetic-v1",
            "seed": self.seed,
            "frames": int(self.videos.shape[1]),
            "size": self.size,
            "classes": [asdict(c) for c in self.classes],
            "clips": [{"id": i, "class": int(l), "seed": s}
                      for i, (l, s) in enumerate(zip(self.labels.tolist(), self.clip_seeds))],
        }
        with open(directory / "index.json", "w") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)


def load_dataset(directory) -> SyntheticDataset:
    directory = Path(directory)
    with open(directory / "index.json") as fh:
        index = json.load(fh)
    videos = cdt.load(directory / "videos.cdt")
    centers = cdt.load(directory / "centers.cdt")
    labels = np.array([c["class"] for c in index["clips"]], dtype=np.int64)
    seeds = [c["seed"] for c in index["clips"]]
    classes = [ToyClassSpec.from_dict(c) for c in index["classes"]]
    return SyntheticDataset(videos, labels, centers, seeds, classes, index["seed"])


def generate_dataset(
    n_per_class: int,
    classes: Sequence[ToyClassSpec] | None = None,
    frames: int = 8,
    size: int = 32,
    seed: int = 0,
    patch: int = 4,
) -> SyntheticDataset:
    """Render ``n_per_class`` clips per class, interleaved by class."""
    if n_per_class < 1:
        raise ParameterError("n_per_class must be >= 1")
    if size % patch:
        raise ParameterError(f"frame size {size} is not divisible by codec patch {patch}")
    if frames < 1:
        raise ParameterError("frames must be >= 1")
    classes = list(classes) if classes is not None else default_classes()
    n = n_per_class * len(classes)
    videos = np.empty((n, frames, 3, size, size), dtype=np.float32)
    centers = np.empty((n, frames, 2), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    clip_seeds = []
    for i in range(n):
        spec = classes[i % len(classes)]
        clip_seed = [seed, i]
        video, cen = render_clip(spec, frames, size, np.random.default_rng(clip_seed))
        videos[i], centers[i], labels[i] = video, cen, spec.class_id
        clip_seeds.append(clip_seed)
    return SyntheticDataset(videos, labels, centers, clip_seeds, classes, seed)


def temporal_smoothness(clip: np.ndarray) -> float:
    """Mean absolute per-pixel difference between consecutive frames."""
    clip = np.asarray(clip)
    if clip.shape[0] < 2:
        raise ParameterError("temporal smoothness needs at least 2 frames")
    return float(np.abs(np.diff(clip.astype(np.float64), axis=0)).mean())


def quadrant(centers: np.ndarray, size: int) -> np.ndarray:
    """Object-position quadrant 0..3 (row-major) for centers [..., 2]."""
    half = size / 2.0
    return (centers[..., 0] >= half).astype(np.int64) * 2 + (centers[..., 1] >= half).astype(np.int64)
