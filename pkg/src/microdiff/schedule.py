"""Discrete-time noise schedule, noising operator with offset noise, loss weighting.

The schedule stores explicit noise magnitudes ``sigma_1 < ... < sigma_M`` derived
from a variance-preserving beta ramp, so that discrete-time training and the
continuous-time samplers share one representation. A noisy sample is always
``x_t = x_0 + sigma * epsilon`` in this parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly increasing noise levels with per-level loss weights ``sigma^-2``."""

    num_levels: int
    beta_min: float
    beta_max: float
    sigmas: torch.Tensor  # (M,) float64, strictly increasing
    weights: torch.Tensor  # (M,) float64, equal to sigmas**-2

    def __post_init__(self):
        if self.sigmas.shape != (self.num_levels,):
            raise ValueError("sigmas length must equal num_levels")
        if self.weights.shape != (self.num_levels,):
            raise ValueError("weights length must equal num_levels")
        if not bool(torch.all(self.sigmas > 0)):
            raise ValueError("sigmas must be positive")
        if not bool(torch.all(self.sigmas[1:] > self.sigmas[:-1])):
            raise ValueError("sigmas must be strictly increasing")
        rel = torch.abs(self.weights * self.sigmas**2 - 1.0)
        if not bool(torch.all(rel < 1e-12)):
            raise ValueError("weights must equal sigmas**-2")

    def sigma(self, level_index: int) -> float:
        self._check_level(level_index)
        return float(self.sigmas[level_index])

    def config(self) -> dict:
        """Serializable construction parameters; sigmas are recomputed, never stored."""
        return {
            "num_levels": self.num_levels,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
        }

    def _check_level(self, level_index: int) -> None:
        if not 0 <= level_index < self.num_levels:
            raise IndexError(f"level {level_index} out of range [0, {self.num_levels})")


@dataclass(frozen=True)
class NoisySample:
    """Result of noising a clean input at one discrete level."""

    x_t: torch.Tensor
    level_index: int
    epsilon: torch.Tensor  # retained for loss computation


def build_schedule(num_levels: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Build the discrete schedule from a beta ramp linear in the level index.

    sigma_i = sqrt((1 - abar_i) / abar_i) with abar_i the cumulative product of
    (1 - beta_j); weights are sigma^-2.
    """
    if num_levels < 2:
        raise ValueError("num_levels must be >= 2")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    betas = torch.linspace(beta_min, beta_max, num_levels, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    sigmas = torch.sqrt((1.0 - alpha_bar) / alpha_bar)
    return NoiseSchedule(
        num_levels=num_levels,
        beta_min=float(beta_min),
        beta_max=float(beta_max),
        sigmas=sigmas,
        weights=sigmas**-2,
    )


def schedule_from_config(config: dict) -> NoiseSchedule:
    return build_schedule(config["num_levels"], config["beta_min"], config["beta_max"])


def draw_unit_noise(
    shape: torch.Size,
    offset_level: float,
    rng: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """i.i.d. Gaussian draw plus a per-channel constant Gaussian scaled by offset_level.

    The constant component is broadcast over the two trailing (spatial) axes,
    letting the model reach extreme per-channel means.
    """
    if offset_level < 0:
        raise ValueError("offset_level must be >= 0")
    eps = torch.randn(shape, generator=rng, dtype=dtype)
    if offset_level > 0:
        flat = torch.randn(shape[:-2], generator=rng, dtype=dtype)
        eps = eps + offset_level * flat[..., None, None]
    return eps


def add_noise(
    x0: torch.Tensor,
    level_index: int,
    schedule: NoiseSchedule,
    offset_level: float,
    rng: torch.Generator,
) -> NoisySample:
    """Noise a clean tensor at one level: ``x_t = x_0 + sigma * epsilon``."""
    schedule._check_level(level_index)
    eps = draw_unit_noise(x0.shape, offset_level, rng, dtype=x0.dtype)
    sigma = float(schedule.sigmas[level_index])
    return NoisySample(x_t=x0 + sigma * eps, level_index=level_index, epsilon=eps)


def loss_weight(schedule: NoiseSchedule, level_index: int) -> float:
    schedule._check_level(level_index)
    return float(schedule.weights[level_index])
