"""Noise-prediction network for latent videos.

Tokens live on a [frames x patches] grid.  The network interleaves
spatial blocks (attention across the patches of one frame) with
TimeStream blocks (attention across the frames of one patch location),
each conditioned through zero-initialized adaptive normalization driven by
a class prototype plus a time-step embedding, and each attention value
stream receiving a lambda-weighted embedding of the noisy input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DimensionError, ParameterError
from .numerics import ops
from .numerics.params import ParamStore, load_arrays, name_rng, save_arrays
from .numerics.tensor import Tensor, no_record

CLASS_ENCODINGS = ("prototype", "onehot", "random")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    patch: int = 2
    dim: int = 64
    heads: int = 4
    depth: int = 4
    cond_dim: int = 64
    num_classes: int = 3
    mlp_ratio: int = 4
    temporal: bool = True
    class_encoding: str = "prototype"
    noise_embed: bool = True
    pos_embed: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ParameterError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.class_encoding not in CLASS_ENCODINGS:
            raise ParameterError(f"unknown class encoding {self.class_encoding!r}")
        if self.class_encoding == "onehot" and self.num_classes > self.cond_dim:
            raise ParameterError("one-hot encoding needs cond_dim >= num_classes")
        for name in ("latent_channels", "patch", "dim", "heads", "depth", "cond_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")


# Full-size geometry (28 interleaved pairs, 1,024-d prototypes), far beyond desk scale; not a test default.
FULL_SCALE = DenoiserConfig(dim=1152, heads=16, depth=28, cond_dim=1024)

# Ablation variants: rows of the temporal-coherence and content-control comparisons.
VARIANTS: dict[str, dict] = {
    "spatial_only": {"temporal": False},
    "timestream": {},
    "onehot": {"class_encoding": "onehot", "noise_embed": False},
    "random_enc": {"class_encoding": "random", "noise_embed": False},
    "prototypes": {"noise_embed": False},
    "content_aware": {},
}


def variant_config(base: DenoiserConfig, variant: str) -> DenoiserConfig:
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(base, **VARIANTS[variant])


def sinusoidal(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """[cos | sin] embedding of integer or real positions -> [len, dim]."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = pos[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((pos.shape[0], 1))], axis=1)
    return emb


def spatial_positions(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """2-D sin/cos table [grid_h * grid_w, dim]; half the channels per axis."""
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    half = dim // 2
    return np.concatenate(
        [sinusoidal(rows.reshape(-1), half), sinusoidal(cols.reshape(-1), dim - half)], axis=1
    )


# --------------------------------------------------------------------------
# token grid
# --------------------------------------------------------------------------


@dataclass
class LatentVideo:
    """Token grid [..., F, P, D] plus the geometry needed to undo patching."""

    tokens: Tensor
    frames: int
    patches: int
    patch: int
    channels: int
    height: int
    width: int


def patchify_array(latent: np.ndarray, p: int) -> np.ndarray:
    """[..., F, C, h, w] -> [..., F, P, C*p*p] with row-major patch order."""
    *lead, F, C, h, w = latent.shape
    if h % p or w % p:
        raise ParameterError(f"latent extents {h}x{w} are not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = latent.reshape(*lead, F, C, gh, p, gw, p)
    n = len(lead)
    axes = tuple(range(n)) + tuple(n + a for a in (0, 2, 4, 1, 3, 5))
    return x.transpose(axes).reshape(*lead, F, gh * gw, C * p * p)


def unpatchify_array(tokens: np.ndarray, p: int, channels: int, height: int, width: int) -> np.ndarray:
    *lead, F, P, _ = tokens.shape
    gh, gw = height // p, width // p
    x = tokens.reshape(*lead, F, gh, gw, channels, p, p)
    n = len(lead)
    axes = tuple(range(n)) + tuple(n + a for a in (0, 3, 1, 4, 2, 5))
    return x.transpose(axes).reshape(*lead, F, channels, height, width)


def patchify(
    latent: np.ndarray,
    p: int,
    proj_w=None,
    proj_b=None,
    spatial_pos: np.ndarray | None = None,
    temporal_pos: np.ndarray | None = None,
) -> LatentVideo:
    """Cut each frame into p x p patches, project them, add positions.

    Without a projection the raw flattened patches are the tokens.
    """
    latent = np.asarray(latent)
    if latent.ndim < 4:
        raise DimensionError(f"latent must be [..., F, C, h, w], got shape {latent.shape}")
    *_, F, C, h, w = latent.shape
    raw = patchify_array(latent, p)
    tokens = Tensor(raw)
    if proj_w is not None:
        tokens = ops.linear(tokens, proj_w, proj_b)
    pos = None
    if spatial_pos is not None:
        pos = spatial_pos[None, :, :]
    if temporal_pos is not None:
        tp = temporal_pos[:, None, :]
        pos = tp if pos is None else pos + tp
    if pos is not None:
        tokens = ops.add(tokens, pos.astype(tokens.dtype))
    return LatentVideo(tokens, F, raw.shape[-2], p, C, h, w)


def unpatchify(video: LatentVideo, tokens: Tensor | None = None) -> Tensor:
    """Inverse of the patch cut; ``tokens`` defaults to ``video.tokens``."""
    x = video.tokens if tokens is None else tokens
    p, C, h, w = video.patch, video.channels, video.height, video.width
    if x.shape[-1] != C * p * p:
        raise DimensionError(f"token width {x.shape[-1]} != C*p*p = {C * p * p}")
    lead = x.shape[:-3]
    F = x.shape[-3]
    n = len(lead)
    x = ops.reshape(x, (*lead, F, h // p, w // p, C, p, p))
    axes = tuple(range(n)) + tuple(n + a for a in (0, 3, 1, 4, 2, 5))
    x = ops.permute(x, axes)
    return ops.reshape(x, (*lead, F, C, h, w))


# --------------------------------------------------------------------------
# attention and blocks
# --------------------------------------------------------------------------


def attention_with_injection(
    x: Tensor,
    embed: Tensor | None,
    lam: Tensor | None,
    heads: int,
    w: Mapping[str, Tensor],
    return_weights: bool = False,
):
    """Multi-head self-attention over the second-to-last axis of ``x``.

    The value stream is ``V + lam * embed``.  ``w`` holds ``wq, bq, wk, bk,
    wv, bv, wo, bo``.
    """
    *lead, L, D = x.shape
    if D % heads:
        raise ParameterError(f"width {D} is not divisible by {heads} heads")
    dk = D // heads
    q = ops.mul(ops.linear(x, w["wq"], w["bq"]), 1.0 / math.sqrt(dk))
    k = ops.linear(x, w["wk"], w["bk"])
    v = ops.linear(x, w["wv"], w["bv"])
    if embed is not None and lam is not None:
        v = ops.add(v, ops.mul(lam, embed))
    n = len(lead)
    to_heads = tuple(range(n)) + (n + 1, n, n + 2)
    qh = ops.permute(ops.reshape(q, (*lead, L, heads, dk)), to_heads)
    kt = ops.permute(ops.reshape(k, (*lead, L, heads, dk)), tuple(range(n)) + (n + 1, n + 2, n))
    vh = ops.permute(ops.reshape(v, (*lead, L, heads, dk)), to_heads)
    att = ops.softmax_last(ops.matmul(qh, kt))
    out = ops.matmul(att, vh)
    out = ops.reshape(ops.permute(out, to_heads), (*lead, L, D))
    out = ops.linear(out, w["wo"], w["bo"])
    return (out, att) if return_weights else out


@dataclass
class ConditionState:
    """Per-forward conditioning shared by every block."""

    labels: np.ndarray
    t: np.ndarray
    cond: Tensor  # [B, d_cond] class encoding + time embedding
    hidden: Tensor  # [B, D] activated condition features feeding the modulation maps
    embed: Tensor | None = None  # [B, F, P, D] noisy-input embedding
    embed_t: Tensor | None = None  # same, in [B, P, F, D] layout
    cache: dict = field(default_factory=dict)


class Denoiser:
    """epsilon-prediction network; parameters live in ``self.params``."""

    def __init__(self, config: DenoiserConfig | None = None, **overrides):
        cfg = config or DenoiserConfig()
        if overrides:
            cfg = replace(cfg, **overrides)
        self.config = cfg
        self.trace: list[str] | None = None
        self.params = ParamStore(seed=cfg.seed)
        self._build()

    # ---------------------------------------------------------------- params
    def _linear(self, name: str, d_in: int, d_out: int, zero: bool = False) -> None:
        if zero:
            self.params.zeros(f"{name}.w", (d_in, d_out))
        else:
            self.params.normal(f"{name}.w", (d_in, d_out), fan_in=d_in)
        self.params.zeros(f"{name}.b", (d_out,))

    def _build(self) -> None:
        c = self.config
        D, P = c.dim, self.params
        self._linear("patch", c.latent_channels * c.patch * c.patch, D)
        if c.class_encoding == "prototype":
            P.normal("prototypes", (c.num_classes, c.cond_dim), fan_in=1)
            self.class_table = None
        elif c.class_encoding == "onehot":
            self.class_table = np.eye(c.num_classes, c.cond_dim)
        else:
            self.class_table = name_rng(c.seed, "random_encoding").standard_normal((c.num_classes, c.cond_dim))
        self._linear("cond.fc1", c.cond_dim, D)
        self._linear("cond.fc2", D, D)
        if c.noise_embed:
            self._linear("embed.fc1", D, c.mlp_ratio * D)
            self._linear("embed.fc2", c.mlp_ratio * D, D)
        for i in range(c.depth):
            for half in ("a", "b"):
                self._block_params(f"blocks.{i}.{half}")
        for m in ("shift", "scale"):
            self._linear(f"final.{m}", D, D, zero=True)
        self._linear("head", D, c.latent_channels * c.patch * c.patch, zero=True)

    def _block_params(self, prefix: str) -> None:
        c = self.config
        D = c.dim
        for m in ("wq", "wk", "wv", "wo"):
            self.params.normal(f"{prefix}.attn.{m}", (D, D), fan_in=D)
            self.params.zeros(f"{prefix}.attn.b{m[1]}", (D,))
        self._linear(f"{prefix}.mlp.fc1", D, c.mlp_ratio * D)
        self._linear(f"{prefix}.mlp.fc2", c.mlp_ratio * D, D)
        for m in ("shift_attn", "scale_attn", "gate_attn", "shift_mlp", "scale_mlp", "gate_mlp"):
            self._linear(f"{prefix}.mod.{m}", D, D, zero=True)
        if c.noise_embed:
            self.params.zeros(f"{prefix}.lam", (1,))

    def parameter_count(self) -> int:
        return self.params.count()

    def _lin(self, x, name: str) -> Tensor:
        return ops.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    # -------------------------------------------------------------- pieces
    def patchify(self, latent: np.ndarray) -> LatentVideo:
        c = self.config
        *_, F, C, h, w = np.shape(latent)
        if C != c.latent_channels:
            raise DimensionError(f"expected {c.latent_channels} latent channels, got {C}")
        sp = tp = None
        if c.pos_embed:
            sp = spatial_positions(h // c.patch, w // c.patch, c.dim)
            tp = sinusoidal(np.arange(F), c.dim)
        return patchify(latent, c.patch, self.params["patch.w"], self.params["patch.b"], sp, tp)

    def class_encoding(self, labels) -> Tensor:
        c = self.config
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= c.num_classes):
            raise ParameterError(f"label outside 0..{c.num_classes - 1}: {labels}")
        if self.class_table is None:
            return ops.take_rows(self.params["prototypes"], labels)
        return Tensor(self.class_table[labels].astype(self.params.dtype))

    def embed_noisy(self, tokens: Tensor) -> Tensor:
        """Shared token-wise MLP (D -> 4D -> D) over the noisy-input tokens."""
        return self._lin(ops.gelu(self._lin(tokens, "embed.fc1")), "embed.fc2")

    def condition(self, labels, t, tokens: Tensor | None = None) -> ConditionState:
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t.shape != labels.shape:
            t = np.broadcast_to(t, labels.shape)
        temb = sinusoidal(t, self.config.cond_dim).astype(self.params.dtype)
        cond = ops.add(self.class_encoding(labels), temb)
        hidden = ops.gelu(self._lin(ops.gelu(self._lin(cond, "cond.fc1")), "cond.fc2"))
        state = ConditionState(labels=labels, t=t, cond=cond, hidden=hidden)
        if self.config.noise_embed and tokens is not None:
            state.embed = self.embed_noisy(tokens)
            state.embed_t = ops.transpose_time_space(state.embed)
        return state

    def modulation(self, cond: ConditionState, prefix: str) -> dict[str, Tensor]:
        """Per-block (shift, scale, gate) pairs, each shaped [B, 1, 1, D]."""
        key = ("mod", prefix)
        if key not in cond.cache:
            B, D = cond.hidden.shape
            cond.cache[key] = {
                m: ops.reshape(self._lin(cond.hidden, f"{prefix}.mod.{m}"), (B, 1, 1, D))
                for m in ("shift_attn", "scale_attn", "gate_attn", "shift_mlp", "scale_mlp", "gate_mlp")
            }
        return cond.cache[key]

    def _block(self, x: Tensor, cond: ConditionState, prefix: str, embed: Tensor | None) -> Tensor:
        c = self.config
        mod = self.modulation(cond, prefix)
        attn_w = {m: self.params[f"{prefix}.attn.{m}"] for m in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        lam = self.params[f"{prefix}.lam"] if c.noise_embed else None
        h = ops.modulate(ops.layer_norm(x), mod["shift_attn"], mod["scale_attn"])
        h = attention_with_injection(h, embed, lam, c.heads, attn_w)
        x = ops.gated_residual(x, mod["gate_attn"], h)
        h = ops.modulate(ops.layer_norm(x), mod["shift_mlp"], mod["scale_mlp"])
        h = self._lin(ops.gelu(self._lin(h, f"{prefix}.mlp.fc1")), f"{prefix}.mlp.fc2")
        return ops.gated_residual(x, mod["gate_mlp"], h)

    def spatial_block(self, x: Tensor, cond: ConditionState, prefix: str) -> Tensor:
        """Attention across the P patches of each frame; x is [B, F, P, D]."""
        if self.trace is not None:
            self.trace.append("spatial")
        return self._block(x, cond, prefix, cond.embed)

    def timestream_block(self, x: Tensor, cond: ConditionState, prefix: str) -> Tensor:
        """Attention across the F frames of each patch location."""
        if self.trace is not None:
            self.trace.append("timestream")
        xt = ops.transpose_time_space(x)
        xt = self._block(xt, cond, prefix, cond.embed_t)
        return ops.transpose_time_space(xt)

    # ------------------------------------------------------------- forward
    def forward(self, z_t: np.ndarray, t, labels) -> Tensor:
        """Predict the noise in ``z_t`` [B, F, C, h, w]; returns same shape."""
        z_t = np.asarray(z_t, dtype=self.params.dtype)
        if z_t.ndim != 5:
            raise DimensionError(f"z_t must be [B, F, C, h, w], got shape {z_t.shape}")
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if labels.shape[0] != z_t.shape[0]:
            raise DimensionError(f"{labels.shape[0]} labels for a batch of {z_t.shape[0]}")
        video = self.patchify(z_t)
        cond = self.condition(labels, t, video.tokens)
        x = video.tokens
        for i in range(self.config.depth):
            x = self.spatial_block(x, cond, f"blocks.{i}.a")
            if self.config.temporal:
                x = self.timestream_block(x, cond, f"blocks.{i}.b")
            else:
                x = self.spatial_block(x, cond, f"blocks.{i}.b")
        B, D = cond.hidden.shape
        shift = ops.reshape(self._lin(cond.hidden, "final.shift"), (B, 1, 1, D))
        scale = ops.reshape(self._lin(cond.hidden, "final.scale"), (B, 1, 1, D))
        x = ops.modulate(ops.layer_norm(x), shift, scale)
        return unpatchify(video, self._lin(x, "head"))

    def __call__(self, z_t: np.ndarray, t, labels) -> np.ndarray:
        """Untaped forward returning a plain array (the sampler interface)."""
        with no_record():
            return self.forward(z_t, t, labels).data

    def predict_batched(self, z_t: np.ndarray, t, labels, batch_size: int = 64) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        labels = np.asarray(labels)
        out = [self(z_t[i : i + batch_size], t[i : i + batch_size], labels[i : i + batch_size])
               for i in range(0, z_t.shape[0], batch_size)]
        return np.concatenate(out, axis=0)

    # ---------------------------------------------------------- persistence
    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "Denoiser":
        """A copy of this network holding ``arrays`` as its parameters."""
        other = Denoiser(self.config)
        other.params.load_arrays(arrays)
        return other

    def save(self, directory, extra: dict | None = None) -> None:
        manifest = {"kind": "denoiser", "config": asdict(self.config),
                    "parameter_count": self.parameter_count()}
        if extra:
            manifest.update(extra)
        save_arrays(directory, self.params.arrays(), manifest)


def load_denoiser(directory) -> Denoiser:
    arrays, manifest = load_arrays(directory)
    model = Denoiser(DenoiserConfig(**manifest["config"]))
    model.params.load_arrays(arrays)
    return model


def config_from_manifest(directory) -> DenoiserConfig:
    with open(Path(directory) / "manifest.json") as fh:
        return DenoiserConfig(**json.load(fh)["config"])
