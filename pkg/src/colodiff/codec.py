"""Closed-form per-patch linear autoencoder (PCA codec).

Maps pixel videos [F, 3, H, W] to normalized latents [F, C_lat, H/q, W/q]
by projecting every q x q x 3 patch onto the top principal directions of
the training patches, and back.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .numerics.params import load_arrays, save_arrays

EIG_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class CodecParams:
    patch: int
    mean_patch: np.ndarray  # [3*q*q]
    encoder: np.ndarray  # [C_lat, 3*q*q]
    decoder: np.ndarray  # [3*q*q, C_lat] (= encoder.T)
    latent_mean: np.ndarray  # [C_lat]
    latent_std: np.ndarray  # [C_lat]
    eigenvalues: np.ndarray  # [C_lat]

    @property
    def channels(self) -> int:
        return int(self.encoder.shape[0])

    def mean_video(self, frames: int, height: int, width: int) -> np.ndarray:
        """Video whose every patch equals the training mean patch."""
        q = self.patch
        tokens = np.broadcast_to(self.mean_patch, (frames, height // q, width // q, self.mean_patch.size))
        return _from_patches(np.ascontiguousarray(tokens), q).astype(np.float32)

    def save(self, directory) -> None:
        arrays = {"mean_patch": self.mean_patch, "encoder": self.encoder, "decoder": self.decoder,
                  "latent_mean": self.latent_mean, "latent_std": self.latent_std,
                  "eigenvalues": self.eigenvalues}
        save_arrays(directory, arrays, {"kind": "pca-codec", "patch": self.patch, "channels": self.channels})


def load_codec(directory) -> CodecParams:
    arrays, manifest = load_arrays(directory)
    return CodecParams(patch=int(manifest["patch"]), **{k: v.astype(np.float64) for k, v in arrays.items()})


def _to_patches(video: np.ndarray, q: int) -> np.ndarray:
    """[..., 3, H, W] -> [..., H/q, W/q, 3*q*q]."""
    *lead, C, H, W = video.shape
    if H % q or W % q:
        raise ParameterError(f"frame extents {H}x{W} are not divisible by codec patch {q}")
    x = video.reshape(*lead, C, H // q, q, W // q, q)
    n = len(lead)
    axes = tuple(range(n)) + tuple(n + a for a in (1, 3, 0, 2, 4))
    return x.transpose(axes).reshape(*lead, H // q, W // q, C * q * q)


def _from_patches(tokens: np.ndarray, q: int, channels: int = 3) -> np.ndarray:
    *lead, gh, gw, _ = tokens.shape
    x = tokens.reshape(*lead, gh, gw, channels, q, q)
    n = len(lead)
    axes = tuple(range(n)) + tuple(n + a for a in (2, 0, 3, 1, 4))
    return x.transpose(axes).reshape(*lead, channels, gh * q, gw * q)


def fit_codec(videos: np.ndarray, q: int = 4, channels: int = 4, chunk: int = 64) -> CodecParams:
    """Principal-subspace codec of the q x q x 3 patches of ``videos`` [N, F, 3, H, W]."""
    videos = np.asarray(videos)
    if videos.ndim != 5 or videos.shape[0] == 0:
        raise ParameterError(f"expected a non-empty [N, F, 3, H, W] array, got {videos.shape}")
    d = 3 * q * q
    if not (1 <= channels <= d):
        raise ParameterError(f"latent channels must lie in 1..{d}")
    total = np.zeros(d)
    outer = np.zeros((d, d))
    count = 0
    for i in range(0, videos.shape[0], chunk):
        p = _to_patches(videos[i:i + chunk].astype(np.float64), q).reshape(-1, d)
        total += p.sum(axis=0)
        outer += p.T @ p
        count += p.shape[0]
    mean = total / count
    cov = outer / count - np.outer(mean, mean)
    evals, evecs = np.linalg.eigh((cov + cov.T) / 2)
    order = np.argsort(evals)[::-1][:channels]
    evals = np.maximum(evals[order], EIG_FLOOR)
    enc = evecs[:, order].T
    # deterministic sign: largest-magnitude entry of each direction positive
    signs = np.sign(enc[np.arange(channels), np.abs(enc).argmax(axis=1)])
    enc = enc * signs[:, None]
    # projected coordinates are centered, so their mean is 0 and std is sqrt(eigenvalue)
    return CodecParams(patch=q, mean_patch=mean, encoder=enc, decoder=enc.T.copy(),
                       latent_mean=np.zeros(channels), latent_std=np.sqrt(evals), eigenvalues=evals)


def encode(video: np.ndarray, codec: CodecParams) -> np.ndarray:
    """[..., F, 3, H, W] -> normalized latents [..., F, C_lat, H/q, W/q]."""
    video = np.asarray(video)
    if video.ndim < 4 or video.shape[-3] != 3:
        raise ParameterError(f"expected [..., F, 3, H, W] video, got shape {video.shape}")
    q = codec.patch
    p = _to_patches(video.astype(np.float64), q)
    z = (p - codec.mean_patch) @ codec.encoder.T
    z = (z - codec.latent_mean) / codec.latent_std
    n = z.ndim
    # [..., gh, gw, C] -> [..., C, gh, gw]
    return np.moveaxis(z, n - 1, n - 3).astype(np.float32)


def decode(latent: np.ndarray, codec: CodecParams, clamp: bool = True) -> np.ndarray:
    """Normalized latents [..., F, C_lat, h, w] -> pixels [..., F, 3, h*q, w*q] in [0, 1]."""
    latent = np.asarray(latent)
    if latent.ndim < 4 or latent.shape[-3] != codec.channels:
        raise ParameterError(f"expected [..., F, {codec.channels}, h, w] latents, got shape {latent.shape}")
    n = latent.ndim
    z = np.moveaxis(latent.astype(np.float64), n - 3, n - 1)
    z = z * codec.latent_std + codec.latent_mean
    p = z @ codec.decoder.T + codec.mean_patch
    out = _from_patches(p, codec.patch)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def psnr(reference: np.ndarray, estimate: np.ndarray, peak: float = 1.0) -> float:
    err = np.mean((np.asarray(reference, np.float64) - np.asarray(estimate, np.float64)) ** 2)
    if err == 0:
        return float("inf")
    return float(10 * np.log10(peak * peak / err))
