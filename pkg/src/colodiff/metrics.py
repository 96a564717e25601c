"""Fréchet distances (FID, clip-level FVD analog) and Inception Score.

Features come from a small frame classifier trained on the synthetic
data instead of Inception/I3D, so absolute values are only comparable
within this package.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .numerics import ops
from .numerics.params import ParamStore, load_arrays, save_arrays
from .numerics.tensor import Tensor, backward, no_record, record
from .synthdata import quadrant
from .trainer import OptimizerState, optimizer_step

log = logging.getLogger(__name__)

MIN_FRAMES = 64


# ------------------------------------------------------------ Gaussian fit


@dataclass(frozen=True, eq=False)
class FrechetStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def fit_gaussian(features) -> FrechetStats:
    """Sample mean and unbiased sample covariance of row vectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ParameterError(f"need at least 2 feature vectors, got shape {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (x.shape[0] - 1)
    return FrechetStats(mu, (sigma + sigma.T) / 2, x.shape[0])


def matrix_sqrt_psd(m, tol: float = 1e-6) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; negative eigenvalues clamp to 0."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > tol * scale:
        raise ContractError("matrix is not symmetric within tolerance")
    evals, evecs = np.linalg.eigh((m + m.T) / 2)
    root = np.sqrt(np.clip(evals, 0.0, None))
    return (evecs * root) @ evecs.T


def frechet_distance(r: FrechetStats, g: FrechetStats) -> float:
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2), clamped at 0."""
    if r.mu.shape != g.mu.shape:
        raise ParameterError(f"feature dimensions differ: {r.mu.shape} vs {g.mu.shape}")
    diff = r.mu - g.mu
    root_r = matrix_sqrt_psd(r.sigma)
    middle = root_r @ g.sigma @ root_r
    cross = matrix_sqrt_psd((middle + middle.T) / 2)
    value = float(diff @ diff + np.trace(r.sigma) + np.trace(g.sigma) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# ------------------------------------------------------ feature extractor


@dataclass(frozen=True)
class ExtractorConfig:
    size: int = 32
    hidden: int = 128
    features: int = 32
    num_classes: int = 3
    quadrants: int = 4
    seed: int = 0

    @property
    def modes(self) -> int:
        return self.num_classes * self.quadrants


class FeatureExtractor:
    """Frame MLP predicting (class, object quadrant) jointly.

    The softmax over the class x quadrant "modes" plays the role of the
    Inception label distribution; summing over quadrants gives the class
    posterior.  The penultimate activations are the FID features.
    """

    def __init__(self, config: ExtractorConfig | None = None):
        self.config = c = config or ExtractorConfig()
        self.params = ParamStore(seed=c.seed)
        d_in = 3 * c.size * c.size
        self.params.normal("fc1.w", (d_in, c.hidden), fan_in=d_in)
        self.params.zeros("fc1.b", (c.hidden,))
        self.params.normal("fc2.w", (c.hidden, c.features), fan_in=c.hidden)
        self.params.zeros("fc2.b", (c.features,))
        self.params.normal("out.w", (c.features, c.modes), fan_in=c.features)
        self.params.zeros("out.b", (c.modes,))

    def _features(self, frames: np.ndarray) -> Tensor:
        x = np.asarray(frames, dtype=np.float32).reshape(frames.shape[0], -1) - 0.5
        p = self.params
        h = ops.gelu(ops.linear(x, p["fc1.w"], p["fc1.b"]))
        return ops.gelu(ops.linear(h, p["fc2.w"], p["fc2.b"]))

    def _logits(self, feats: Tensor) -> Tensor:
        return ops.linear(feats, self.params["out.w"], self.params["out.b"])

    def _frames(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        s = self.config.size
        if x.shape[-3:] != (3, s, s):
            raise DimensionError(f"expected frames [..., 3, {s}, {s}], got {x.shape}")
        return x.reshape(-1, 3, s, s)

    def frame_features(self, frames: np.ndarray, batch: int = 512) -> np.ndarray:
        frames = self._frames(frames)
        with no_record():
            out = [self._features(frames[i:i + batch]).data for i in range(0, frames.shape[0], batch)]
        return np.concatenate(out).astype(np.float64)

    def mode_probs(self, frames: np.ndarray, batch: int = 512) -> np.ndarray:
        frames = self._frames(frames)
        out = []
        with no_record():
            for i in range(0, frames.shape[0], batch):
                logits = self._logits(self._features(frames[i:i + batch])).data.astype(np.float64)
                z = np.exp(logits - logits.max(axis=1, keepdims=True))
                out.append(z / z.sum(axis=1, keepdims=True))
        return np.concatenate(out)

    def class_probs(self, frames: np.ndarray) -> np.ndarray:
        c = self.config
        return self.mode_probs(frames).reshape(-1, c.num_classes, c.quadrants).sum(axis=2)

    def classify_clips(self, clips: np.ndarray) -> np.ndarray:
        """Clip label = argmax of summed per-frame class log-probabilities."""
        clips = np.asarray(clips)
        n, f = clips.shape[:2]
        p = self.class_probs(clips.reshape(-1, *clips.shape[2:])).reshape(n, f, -1)
        return np.log(np.clip(p, 1e-12, None)).sum(axis=1).argmax(axis=1)

    def clip_features(self, clips: np.ndarray) -> np.ndarray:
        """Mean frame feature concatenated with mean |frame-to-frame feature delta|."""
        clips = np.asarray(clips)
        n, f = clips.shape[:2]
        if f < 2:
            raise ParameterError("clip features need at least 2 frames")
        feats = self.frame_features(clips.reshape(-1, *clips.shape[2:])).reshape(n, f, -1)
        deltas = np.abs(np.diff(feats, axis=1)).mean(axis=1)
        return np.concatenate([feats.mean(axis=1), deltas], axis=1)

    def save(self, directory, extra: dict | None = None) -> None:
        manifest = {"kind": "feature-extractor", "config": asdict(self.config)}
        manifest.update(extra or {})
        save_arrays(directory, self.params.arrays(), manifest)


def load_extractor(directory) -> FeatureExtractor:
    arrays, manifest = load_arrays(directory)
    ext = FeatureExtractor(ExtractorConfig(**manifest["config"]))
    ext.params.load_arrays(arrays)
    return ext


def mode_labels(labels: np.ndarray, centers: np.ndarray, size: int, quadrants: int = 4) -> np.ndarray:
    """Per-frame (class, quadrant) index for clips with ``labels`` [N] and ``centers`` [N, F, 2]."""
    return labels[:, None] * quadrants + quadrant(centers, size)


def train_extractor(videos: np.ndarray, labels: np.ndarray, centers: np.ndarray,
                    config: ExtractorConfig | None = None, epochs: int = 12, batch: int = 128,
                    lr: float = 1e-3) -> FeatureExtractor:
    """Fit the frame classifier with AdamW on cross-entropy over modes."""
    ext = FeatureExtractor(config)
    c = ext.config
    frames = videos.reshape(-1, *videos.shape[2:])
    targets = mode_labels(labels, centers, c.size, c.quadrants).reshape(-1)
    rng = np.random.default_rng([c.seed, 31337])
    opt = OptimizerState(lr=lr)
    params = dict(ext.params.items())
    for epoch in range(epochs):
        order = rng.permutation(frames.shape[0])
        total = 0.0
        for i in range(0, order.size, batch):
            idx = order[i:i + batch]
            ext.params.zero_grad()
            with record():
                loss = ops.cross_entropy(ext._logits(ext._features(frames[idx])), targets[idx])
                backward(loss)
            optimizer_step(opt, params, {k: p.grad for k, p in params.items()})
            total += loss.item() * idx.size
        log.info("extractor epoch %d loss %.4f", epoch, total / order.size)
    return ext


def clip_accuracy(ext: FeatureExtractor, clips: np.ndarray, labels: np.ndarray) -> float:
    return float((ext.classify_clips(clips) == np.asarray(labels)).mean())


# ----------------------------------------------------------------- metrics


def _frames_of(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(-1, *x.shape[-3:])


def fid(real: np.ndarray, gen: np.ndarray, extractor: FeatureExtractor) -> float:
    """Fréchet distance between per-frame features of two frame (or clip) sets."""
    rf, gf = _frames_of(real), _frames_of(gen)
    if rf.shape[0] < MIN_FRAMES or gf.shape[0] < MIN_FRAMES:
        raise ParameterError(f"FID needs >= {MIN_FRAMES} frames per set, got {rf.shape[0]} and {gf.shape[0]}")
    value = frechet_distance(fit_gaussian(extractor.frame_features(rf)),
                             fit_gaussian(extractor.frame_features(gf)))
    log.info("FID %.5f (real=%d frames, gen=%d frames)", value, rf.shape[0], gf.shape[0])
    return value


def fvd_analog(real: np.ndarray, gen: np.ndarray, extractor: FeatureExtractor) -> float:
    """Fréchet distance between clip-level spatio-temporal features."""
    real, gen = np.asarray(real), np.asarray(gen)
    if real.ndim != 5 or gen.ndim != 5:
        raise DimensionError("fvd_analog expects clip sets [N, F, 3, H, W]")
    if real.shape[1] != gen.shape[1]:
        raise ParameterError(f"frame counts differ: {real.shape[1]} vs {gen.shape[1]}")
    for x in (real, gen):
        if x.shape[0] * x.shape[1] < MIN_FRAMES or x.shape[0] < 2:
            raise ParameterError(f"FVD needs >= {MIN_FRAMES} frames per set")
    value = frechet_distance(fit_gaussian(extractor.clip_features(real)),
                             fit_gaussian(extractor.clip_features(gen)))
    log.info("FVD-analog %.5f (real=%d clips, gen=%d clips)", value, real.shape[0], gen.shape[0])
    return value


def inception_score_from_probs(probs, splits: int = 4, eps: float = 1e-12) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) over splits."""
    p = np.asarray(probs, dtype=np.float64)
    if splits < 1:
        raise ParameterError("splits must be >= 1")
    if p.ndim != 2 or p.shape[0] < splits:
        raise ParameterError(f"cannot form {splits} non-empty splits from {p.shape[0]} samples")
    if p.shape[0] % splits:
        raise ParameterError(f"{p.shape[0]} samples do not divide into {splits} splits")
    scores = []
    for part in np.split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        # 0 log 0 = 0; the marginal is positive wherever a posterior is
        safe = np.where(part > 0, part, 1.0)
        kl = np.where(part > 0, part * (np.log(safe) - np.log(np.maximum(marginal, eps))), 0.0).sum(axis=1)
        # KL >= 0; clamp rounding noise so identical posteriors score exactly 1
        scores.append(float(np.exp(np.maximum(kl, 0.0).mean())))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(gen: np.ndarray, classifier: FeatureExtractor, splits: int = 4) -> tuple[float, float]:
    """IS over the classifier's (class, quadrant) posterior of every frame."""
    frames = _frames_of(gen)
    usable = frames.shape[0] - frames.shape[0] % splits
    if usable < splits:
        raise ParameterError("too few frames for the requested splits")
    return inception_score_from_probs(classifier.mode_probs(frames[:usable]), splits)
