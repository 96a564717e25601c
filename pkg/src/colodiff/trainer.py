"""Diffusion training loop: noise-prediction loss, AdamW, EMA, early stop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .diffusion import NoiseSchedule, q_sample
from .errors import ContractError, ParameterError, TrainingDivergence
from .numerics import ops
from .numerics.params import ParamStore, load_arrays, save_arrays
from .numerics.tensor import Tensor, backward, no_record, record

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    lr: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    ema_decay: float = 0.999
    max_steps: int = 20000
    eval_every: int = 100
    patience: int = 10
    checkpoint_every: int = 1000
    val_fraction: float = 0.1
    val_clips: int = 64
    seed: int = 0


# --------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None]) -> None:
    """One AdamW update, in place.  Decay is applied to the weights directly."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        data = p.data
        if state.weight_decay:
            data = data * (1.0 - state.lr * state.weight_decay)
        p.data = (data - state.lr * update).astype(p.dtype, copy=False)


# --------------------------------------------------------------------- EMA


@dataclass
class EmaState:
    decay: float
    shadow: dict

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], decay: float) -> "EmaState":
        return cls(decay, {k: p.data.copy() for k, p in params.items()})


def ema_update(ema: EmaState, params: Mapping[str, Tensor], decay: float | None = None) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * param, elementwise."""
    d = ema.decay if decay is None else decay
    if not (0.0 <= d < 1.0):
        raise ParameterError(f"EMA decay must lie in [0, 1), got {d}")
    for k, p in params.items():
        s = ema.shadow[k]
        s *= d
        s += (1.0 - d) * p.data
    return ema


# -------------------------------------------------------------- early stop


def early_stop(history, patience: int, min_delta: float = 1e-6) -> bool:
    """True once the best loss has not improved by more than ``min_delta``
    for ``patience`` consecutive evaluations."""
    if patience < 1:
        raise ParameterError("patience must be >= 1")
    best = math.inf
    stale = 0
    for value in history:
        if value < best - min_delta:
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= patience


# ------------------------------------------------------------------- steps


def diffusion_loss(model, z0: np.ndarray, labels: np.ndarray, t: np.ndarray, eps: np.ndarray,
                   sched: NoiseSchedule) -> Tensor:
    z_t = q_sample(z0, t, eps, sched)
    return ops.mse(model.forward(z_t, t, labels), eps)


def training_step(model, batch: tuple[np.ndarray, np.ndarray], sched: NoiseSchedule, rng: np.random.Generator,
                  opt: OptimizerState, ema: EmaState | None = None) -> float:
    """Sample t and noise, take one AdamW step and one EMA update; return the loss."""
    z0, labels = batch
    if len(z0) == 0:
        raise ParameterError("empty batch")
    t = rng.integers(1, sched.T + 1, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape, dtype=np.float32)
    model.params.zero_grad()
    with record():
        loss = diffusion_loss(model, z0, labels, t, eps, sched)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence(f"non-finite loss at step {opt.step + 1}")
        backward(loss)
    grads = {k: p.grad for k, p in model.params.items()}
    optimizer_step(opt, dict(model.params.items()), grads)
    if ema is not None:
        ema_update(ema, dict(model.params.items()))
    return value


class ValidationSet:
    """Fixed (clip, t, noise) triples so validation loss is deterministic."""

    def __init__(self, latents: np.ndarray, labels: np.ndarray, T: int, seed: int, max_clips: int = 64):
        n = min(max_clips, latents.shape[0])
        rng = np.random.default_rng([seed, 104729])
        idx = np.sort(rng.choice(latents.shape[0], size=n, replace=False))
        self.z0 = latents[idx]
        self.labels = labels[idx]
        self.t = rng.integers(1, T + 1, size=n)
        self.eps = rng.standard_normal(self.z0.shape, dtype=np.float32)

    def loss(self, model, sched: NoiseSchedule, batch_size: int = 32) -> float:
        total = 0.0
        with no_record():
            for i in range(0, self.z0.shape[0], batch_size):
                sl = slice(i, i + batch_size)
                out = diffusion_loss(model, self.z0[sl], self.labels[sl], self.t[sl], self.eps[sl], sched)
                total += out.item() * self.z0[sl].shape[0]
        return total / self.z0.shape[0]


# ------------------------------------------------------------------ runner


@dataclass
class TrainState:
    step: int = 0
    history: list = field(default_factory=list)  # validation losses
    log: list = field(default_factory=list)
    stopped_early: bool = False


class Trainer:
    """Owns the model, optimizer, EMA shadow and the sampling RNG stream."""

    def __init__(self, model, sched: NoiseSchedule, latents: np.ndarray, labels: np.ndarray,
                 val_latents: np.ndarray, val_labels: np.ndarray, config: TrainerConfig | None = None):
        self.model = model
        self.sched = sched
        self.config = cfg = config or TrainerConfig()
        self.latents = latents
        self.labels = labels
        self.val = ValidationSet(val_latents, val_labels, sched.T, cfg.seed, cfg.val_clips)
        self.opt = OptimizerState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                                  weight_decay=cfg.weight_decay)
        self.ema = EmaState.from_params(dict(model.params.items()), cfg.ema_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.state = TrainState()

    def ema_model(self):
        return self.model.with_arrays(self.ema.shadow)

    def sanity_check(self, tolerance: float = 0.05) -> float:
        """Validation loss of the untrained network must be ~E[eps^2] = 1."""
        value = self.val.loss(self.model, self.sched)
        if abs(value - 1.0) > tolerance:
            raise ContractError(f"initial loss {value:.4f} is not within {tolerance} of 1.0")
        return value

    def step(self) -> float:
        cfg = self.config
        idx = self.rng.integers(0, self.latents.shape[0], size=cfg.batch_size)
        return training_step(self.model, (self.latents[idx], self.labels[idx]), self.sched, self.rng,
                             self.opt, self.ema)

    def run(self, steps: int | None = None, checkpoint_dir=None,
            on_log: Callable[[dict], None] | None = None) -> TrainState:
        cfg = self.config
        target = min(cfg.max_steps, self.state.step + steps if steps is not None else cfg.max_steps)
        while self.state.step < target and not self.state.stopped_early:
            t0 = time.perf_counter()
            loss = self.step()
            self.state.step += 1
            entry = {"step": self.state.step, "loss": loss, "wall_time": time.perf_counter() - t0}
            if self.state.step % cfg.eval_every == 0:
                val = self.val.loss(self.ema_model(), self.sched)
                self.state.history.append(val)
                entry["val_loss"] = val
                if early_stop(self.state.history, cfg.patience):
                    self.state.stopped_early = True
                    log.info("early stop at step %d", self.state.step)
            self.state.log.append(entry)
            if on_log is not None:
                on_log(entry)
            if checkpoint_dir is not None and (self.state.step % cfg.checkpoint_every == 0):
                self.save(checkpoint_dir)
        if checkpoint_dir is not None:
            self.save(checkpoint_dir)
        return self.state

    # --------------------------------------------------------- persistence
    def save(self, directory) -> None:
        """Write raw/, ema/ and optimizer/ checkpoints plus trainer state."""
        directory = Path(directory)
        meta = {"step": self.state.step, "trainer": asdict(self.config)}
        self.model.save(directory / "raw", extra=meta)
        self.model.with_arrays(self.ema.shadow).save(directory / "ema", extra=meta)
        opt_arrays = {f"m.{k}": v for k, v in self.opt.m.items()}
        opt_arrays.update({f"v.{k}": v for k, v in self.opt.v.items()})
        save_arrays(directory / "optimizer", opt_arrays, {"kind": "adamw", "step": self.opt.step})
        state = {
            "step": self.state.step,
            "history": self.state.history,
            "stopped_early": self.state.stopped_early,
            "rng": self.rng.bit_generator.state,
            "optimizer_step": self.opt.step,
        }
        with open(directory / "trainer_state.json", "w") as fh:
            json.dump(state, fh, indent=1, sort_keys=True)
        with open(directory / "train_log.json", "w") as fh:
            json.dump(self.state.log, fh, indent=0)

    def resume(self, directory) -> None:
        directory = Path(directory)
        raw, _ = load_arrays(directory / "raw")
        self.model.params.load_arrays(raw)
        shadow, _ = load_arrays(directory / "ema")
        self.ema.shadow = {k: v.copy() for k, v in shadow.items()}
        opt, _ = load_arrays(directory / "optimizer")
        self.opt.m = {k[2:]: v.copy() for k, v in opt.items() if k.startswith("m.")}
        self.opt.v = {k[2:]: v.copy() for k, v in opt.items() if k.startswith("v.")}
        with open(directory / "trainer_state.json") as fh:
            state = json.load(fh)
        self.opt.step = state["optimizer_step"]
        self.rng.bit_generator.state = state["rng"]
        self.state.step = state["step"]
        self.state.history = list(state["history"])
        self.state.stopped_early = state["stopped_early"]
        log_path = directory / "train_log.json"
        if log_path.exists():
            with open(log_path) as fh:
                self.state.log = json.load(fh)
