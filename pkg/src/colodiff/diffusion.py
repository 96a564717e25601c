"""Forward noising process, noise schedule and the deterministic
non-Markovian (DDIM-style) reverse sampler.

Time steps are 1-based: ``t`` ranges over ``1..T`` and ``t = 0`` denotes
clean data, with the convention ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ParameterError

# eps_hat = model(z_k [B, ...], k [B], labels [B])
NoisePredictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def abar(self, t) -> np.ndarray:
        """Cumulative product at step(s) ``t`` with ``abar(0) == 1``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ParameterError(f"time step out of range 0..{self.T}: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ParameterError("beta must be a non-empty vector")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ParameterError("every beta must lie in (0, 1)")
    alpha = 1.0 - beta
    for arr in (beta, alpha):
        arr.setflags(write=False)
    alpha_bar = np.cumprod(alpha)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def linear_schedule(T: int = 250, beta_start: float = 4e-4, beta_end: float = 0.08) -> NoiseSchedule:
    """Betas spaced linearly from ``beta_start`` to ``beta_end``.

    The defaults are the familiar 1e-4..0.02 range of a 1000-step chain
    rescaled by 1000 / 250, so the 250-step chain still ends near pure
    noise (``alpha_bar(T)`` about 3e-5 rather than 0.08).  Sampling starts
    from N(0, I), so a chain that ends with visible signal leaves the
    network reading content from noise it never saw in training.
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def _bcast(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape per-example coefficients [B] to broadcast against [B, ...]."""
    coef = np.asarray(coef)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def q_sample(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one step per leading-axis example; ``t = 0``
    returns ``z0`` unchanged.
    """
    if np.shape(eps) != np.shape(z0):
        raise ParameterError(f"noise shape {np.shape(eps)} differs from data shape {np.shape(z0)}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ParameterError(f"t must lie in 0..{sched.T}, got {t}")
    ab = sched.abar(t)
    a = _bcast(np.sqrt(ab), z0)
    s = _bcast(np.sqrt(1.0 - ab), z0)
    return (a * z0 + s * eps).astype(np.result_type(z0, eps), copy=False)


def forward_step(x_prev: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One transition of the Markov chain q(x_t | x_{t-1})."""
    b = sched.beta[t - 1]
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * noise


def predict_x0(z_k: np.ndarray, eps_hat: np.ndarray, k, sched: NoiseSchedule) -> np.ndarray:
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sched.T):
        raise ParameterError(f"k must lie in 1..{sched.T}, got {k}")
    ab = sched.abar(k)
    if np.any(ab < 1e-12):
        raise NumericalError("alpha_bar below 1e-12; clean-data estimate is singular")
    a = _bcast(np.sqrt(ab), z_k)
    s = _bcast(np.sqrt(1.0 - ab), z_k)
    # float64 arithmetic: 1 / sqrt(alpha_bar) reaches ~175 near t = T and
    # would amplify float32 rounding of the subtraction
    x0 = (np.asarray(z_k, np.float64) - s * np.asarray(eps_hat, np.float64)) / a
    return x0.astype(np.result_type(z_k), copy=False)


def ddim_update(z_k: np.ndarray, eps_hat: np.ndarray, abar_k: float, abar_s: float) -> np.ndarray:
    """Deterministic jump between noise levels given their cumulative alphas."""
    if abar_k < 1e-12:
        raise NumericalError("alpha_bar below 1e-12; clean-data estimate is singular")
    z64, e64 = np.asarray(z_k, np.float64), np.asarray(eps_hat, np.float64)
    x0 = (z64 - math.sqrt(1.0 - abar_k) * e64) / math.sqrt(abar_k)
    return (math.sqrt(abar_s) * x0 + math.sqrt(1.0 - abar_s) * e64).astype(np.result_type(z_k), copy=False)


def ddim_step(z_k: np.ndarray, eps_hat: np.ndarray, k: int, s: int, sched: NoiseSchedule) -> np.ndarray:
    """Jump from step ``k`` to an earlier step ``s`` (sigma = 0)."""
    if not (0 <= s < k <= sched.T):
        raise ParameterError(f"need 0 <= s < k <= {sched.T}, got s={s}, k={k}")
    if s == 0:
        return predict_x0(z_k, eps_hat, k, sched)
    return ddim_update(z_k, eps_hat, float(sched.abar(k)), float(sched.abar(s)))


def make_substep_plan(T: int, n_steps: int) -> list[int]:
    """Uniformly spaced, strictly decreasing steps starting at ``T``.

    The hop after the last entry goes to the clean boundary ``s = 0``.
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (1 <= n_steps <= T):
        raise ParameterError(f"n_steps must lie in 1..{T}, got {n_steps}")
    # ceil(T * (n - i) / n); spacing >= 1 keeps the plan strictly decreasing
    return [-(-T * (n_steps - i) // n_steps) for i in range(n_steps)]


def sample(
    model: NoisePredictor,
    labels: Sequence[int] | int,
    n_steps: int,
    seed: int,
    sched: NoiseSchedule,
    shape: Sequence[int],
) -> np.ndarray:
    """Draw latent videos by deterministic skip-step denoising.

    ``shape`` is the per-clip latent shape [F, C_lat, h, w].  A scalar
    ``labels`` yields a single clip of that shape; a sequence yields a
    batch [B, F, C_lat, h, w].  The output is a pure function of
    (model, labels, n_steps, seed).
    """
    single = np.ndim(labels) == 0
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    rng = np.random.default_rng(seed)
    # the chain state stays float64: a rounding error in z_k reaches the
    # final estimate scaled by 1 / sqrt(alpha_bar(k)), which is large near T
    z = rng.standard_normal((lab.shape[0], *shape))
    plan = make_substep_plan(sched.T, n_steps)
    for i, k in enumerate(plan):
        s = plan[i + 1] if i + 1 < len(plan) else 0
        eps_hat = model(z, np.full(lab.shape[0], k, dtype=np.int64), lab)
        z = ddim_step(z, np.asarray(eps_hat, dtype=np.float64), k, s, sched)
    z = z.astype(np.float32)
    return z[0] if single else z
