"""DDPM schedule, forward corruption, and deterministic few-step reverse updates."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """beta/alpha/alpha_bar/sigma^2 sequences; index t runs 1..T (arrays 0-based)."""

    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.size and (np.any(self.beta <= 0) or np.any(self.beta >= 1)):
            raise ScheduleError("beta values must lie in (0, 1)")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        prev = np.concatenate(([1.0], self.alpha_bar[:-1]))
        with np.errstate(divide="ignore", invalid="ignore"):
            self.sigma2 = np.where(
                self.beta > 0,
                (1.0 - prev) / (1.0 - self.alpha_bar) * self.beta,
                0.0)
        if self.beta.size:
            self.sigma2[0] = 0.0  # no posterior variance at t=1

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "beta": self.beta.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        d = json.loads(text)
        beta = np.asarray(d["beta"], dtype=float)
        if beta.size != d["T"]:
            raise ScheduleError("beta length does not match T")
        return cls(beta)


def make_schedule(T: int = 4, beta_start: float = 0.1, beta_end: float = 0.99,
                  spacing: str = "linear") -> NoiseSchedule:
    """Schedule with T steps; large terminal beta so alpha_bar_T ~ 0."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError("require 0 < beta_start <= beta_end < 1")
    if spacing == "linear":
        beta = np.linspace(beta_start, beta_end, T)
    elif spacing == "quadratic":
        beta = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T) ** 2
    else:
        raise ScheduleError(f"unknown spacing: {spacing!r}")
    return NoiseSchedule(beta)


def forward_sample(z0: np.ndarray, t: int, schedule: NoiseSchedule,
                   rng: np.random.Generator):
    """Closed-form forward corruption Z_t = sqrt(ab_t) Z0 + sqrt(1-ab_t) eta.

    Returns (Z_t, eta) so training can target the injected noise.
    """
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"t={t} outside 1..{schedule.T}")
    z0 = np.asarray(z0, dtype=float)
    ab = schedule.alpha_bar[t - 1]
    eta = rng.standard_normal(z0.shape)
    zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eta
    return zt, eta


def forward_chain(z0: np.ndarray, t: int, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """Iterate the single-step forward transition t times (test oracle path)."""
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"t={t} outside 1..{schedule.T}")
    z = np.asarray(z0, dtype=float)
    for i in range(t):
        b = schedule.beta[i]
        z = np.sqrt(1.0 - b) * z + np.sqrt(b) * rng.standard_normal(z.shape)
    return z


def reverse_step(zt: np.ndarray, t: int, eps_pred: np.ndarray,
                 schedule: NoiseSchedule, add_noise: bool = False,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Deterministic mean update Z_{t-1} = (Z_t - (1-a_t)/sqrt(1-ab_t) eps)/sqrt(a_t).

    The stochastic posterior term sqrt(sigma2_t) z is off by default and can
    be enabled for study via `add_noise`.
    """
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"t={t} outside 1..{schedule.T}")
    zt = np.asarray(zt, dtype=float)
    eps_pred = np.asarray(eps_pred, dtype=float)
    if eps_pred.shape != zt.shape:
        raise ContractError("eps_pred shape must match Z_t")
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    z = (zt - (1.0 - a) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)
    if add_noise and t > 1:
        if rng is None:
            raise ValueError("add_noise requires an rng")
        z = z + np.sqrt(schedule.sigma2[t - 1]) * rng.standard_normal(zt.shape)
    return z


def reverse_step_coefficients(t: int, schedule: NoiseSchedule):
    """(coef_z, coef_eps) of the affine reverse update at step t."""
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    return 1.0 / np.sqrt(a), -(1.0 - a) / (np.sqrt(1.0 - ab) * np.sqrt(a))


def diffusion_loss(eps_pred: np.ndarray, eps_true: np.ndarray) -> float:
    """Mean absolute error between predicted and injected noise."""
    eps_pred = np.asarray(eps_pred, dtype=float)
    eps_true = np.asarray(eps_true, dtype=float)
    if eps_pred.shape != eps_true.shape:
        raise ContractError("shape mismatch")
    return float(np.mean(np.abs(eps_pred - eps_true)))


def sample_latent(denoiser, condition: np.ndarray, schedule: NoiseSchedule,
                  seed: int, latent_dim: int | None = None,
                  add_noise: bool = False) -> np.ndarray:
    """Run the reverse chain from Z_T ~ N(0, I) down to Z_0.

    `denoiser` is a callable eta(Z_t, t, B) returning the predicted noise.
    A schedule with T = 0 returns the initial draw unchanged.
    """
    condition = np.asarray(condition, dtype=float)
    dim = condition.shape[-1] if latent_dim is None else latent_dim
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(dim)
    for t in range(schedule.T, 0, -1):
        eps = np.asarray(denoiser(z, t, condition), dtype=float)
        if eps.shape != z.shape:
            raise ContractError(
                f"denoiser returned shape {eps.shape}, expected {z.shape}")
        z = reverse_step(z, t, eps, schedule, add_noise=add_noise, rng=rng)
    return z
