"""Diffusion-process math: noise schedules, forward noising, reverse-posterior stats.

Index convention: t=0 is clean data. ``betas[i]`` stores beta_{i+1}, so
``alpha_bars`` has length T+1 and ``alpha_bars[0] == 1`` makes the t=0
identity exact. All schedule arrays are float64; the tensor-valued
operations accept torch tensors or numpy arrays and preserve their dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ScheduleRangeError, ShapeMismatchError


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays defining the forward/reverse diffusion process.

    betas, alphas have length T (entry i belongs to step t=i+1);
    alpha_bars has length T+1 with alpha_bars[0] = 1.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    # map from step t (1..T) to the timestep of an underlying training
    # schedule; identity for non-strided schedules
    timestep_map: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ScheduleRangeError(f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])

    def model_timestep(self, t: int) -> int:
        """Timestep used to condition the denoiser at sampling step t."""
        self._check_step(t)
        if self.timestep_map is None:
            return t
        return int(self.timestep_map[t - 1])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleRangeError(f"t={t} outside [1, {self.T}]")

    def to_json(self) -> dict:
        """JSON record for job reproducibility."""
        rec = {"T": self.T, "kind": self.meta.get("kind", "linear")}
        for key in ("beta_start", "beta_end"):
            if key in self.meta:
                rec[key] = self.meta[key]
        return rec


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end inclusive."""
    if T < 1:
        raise ScheduleRangeError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleRangeError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate(([1.0], np.cumprod(alphas)))
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        meta={"kind": "linear", "beta_start": beta_start, "beta_end": beta_end},
    )


def schedule_from_json(rec: dict) -> NoiseSchedule:
    if rec.get("kind", "linear") != "linear":
        raise ScheduleRangeError(f"unknown schedule kind {rec.get('kind')!r}")
    return make_linear_schedule(int(rec["T"]), float(rec["beta_start"]), float(rec["beta_end"]))


def stride_schedule(s: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Evenly strided subsequence of a training schedule for fast sampling.

    The strided schedule has its own effective betas
    (1 - abar[tau_i]/abar[tau_{i-1}]) and remembers which original
    timestep each step corresponds to, for denoiser conditioning.
    """
    if steps < 1:
        raise ScheduleRangeError(f"steps must be >= 1, got {steps}")
    if steps > s.T:
        raise ScheduleRangeError(f"steps={steps} exceeds schedule length T={s.T}")
    if s.timestep_map is not None:
        raise ScheduleRangeError("schedule is already strided")
    taus = np.unique(np.round(np.linspace(0, s.T, steps + 1)).astype(np.int64))
    if len(taus) != steps + 1:
        raise ScheduleRangeError(f"cannot pick {steps} distinct timesteps from T={s.T}")
    alpha_bars = s.alpha_bars[taus]
    alphas = alpha_bars[1:] / alpha_bars[:-1]
    betas = 1.0 - alphas
    return NoiseSchedule(
        T=steps,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        timestep_map=taus[1:],
        meta={**s.meta, "strided_from": s.T},
    )


def _check_same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z0, t: int, eps, s: NoiseSchedule):
    """Closed-form forward marginal: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    _check_same_shape(z0, eps)
    abar = s.alpha_bar(t)
    return float(np.sqrt(abar)) * z0 + float(np.sqrt(1.0 - abar)) * eps


def predict_clean(z_t, eps_hat, t: int, s: NoiseSchedule):
    """Invert the forward marginal assuming eps_hat is the exact noise."""
    _check_same_shape(z_t, eps_hat)
    abar = s.alpha_bar(t)
    return (z_t - float(np.sqrt(1.0 - abar)) * eps_hat) / float(np.sqrt(abar))


def posterior_sigma(t: int, s: NoiseSchedule) -> float:
    """Fixed reverse std: sqrt of the posterior variance beta_tilde_t.

    beta_tilde_t = (1-abar_{t-1})/(1-abar_t) * beta_t; zero at t=1
    because abar_0 = 1, so the last reverse step is deterministic.
    """
    s._check_step(t)
    abar_t = s.alpha_bar(t)
    abar_prev = s.alpha_bar(t - 1)
    var = (1.0 - abar_prev) / (1.0 - abar_t) * s.beta(t)
    return float(np.sqrt(max(var, 0.0)))


def posterior_stats(z_t, eps_hat, t: int, s: NoiseSchedule):
    """Reverse-posterior mean from the noise prediction, and the fixed std.

    mu = (z_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t); the std is
    a per-step scalar broadcast to the latent shape.
    """
    _check_same_shape(z_t, eps_hat)
    abar_t = s.alpha_bar(t)
    coef = s.beta(t) / np.sqrt(1.0 - abar_t)
    mu = (z_t - float(coef) * eps_hat) / float(np.sqrt(s.alpha(t)))
    sigma = posterior_sigma(t, s)
    return mu, sigma * _ones_like(z_t)


def _ones_like(x):
    if isinstance(x, np.ndarray):
        return np.ones_like(x)
    import torch

    return torch.ones_like(x)
