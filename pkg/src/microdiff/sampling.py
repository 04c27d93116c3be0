"""Inference: classifier-free guidance, DDIM / probability-flow ODE / SDE
samplers, and the re-noise/denoise refinement pass.

All samplers share one convention: the state lives in ``x = x0 + sigma * eps``
space, trajectories visit a strictly decreasing sigma subsequence drawn from
the discrete schedule, and the final step consumes the clean prediction
directly (the sigma = 0 terminal). Core integrators take a plain
``denoise_fn(x, sigma) -> x0_hat`` so they can be driven by a trained model or
by an analytic test denoiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from .conditioning import MicroCond
from .denoiser import Denoiser
from .schedule import NoiseSchedule
from .textenc import TextContext


@dataclass(frozen=True)
class SdeConfig:
    """Langevin strength beta(t) over t in [0, 1] and integrator step count."""

    beta: float | Callable[[float], float] = 1.0
    steps: int = 200

    def beta_at(self, t: float) -> float:
        value = self.beta(t) if callable(self.beta) else float(self.beta)
        if value < 0:
            raise ValueError("beta(t) must be >= 0")
        return value


@dataclass(frozen=True)
class SampleRequest:
    prompt: str = ""
    microcond: MicroCond = field(
        default_factory=lambda: MicroCond.inference_default(size=(64, 64), target=(64, 64))
    )
    guidance_w: float = 5.0
    steps: int = 50
    sampler: str = "ddim"
    seed: int = 0
    count: int = 1
    refine_levels: int = 0
    out_size: tuple[int, int] | None = None  # output dims; defaults to the target conditioning

    def __post_init__(self):
        if self.steps < 1 or self.count < 1:
            raise ValueError("steps and count must be >= 1")
        if self.guidance_w < 0:
            raise ValueError("guidance strength must be >= 0")
        if self.sampler not in ("ddim", "ode", "sde"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def output_size(self) -> tuple[int, int]:
        return self.out_size if self.out_size is not None else self.microcond.target


def cfg_denoise(model, x, level_index, context, null_context, w, microcond, schedule):
    """Guided prediction ``(1 + w) * D(x; c) - w * D(x; null)``.

    ``model`` is called through :func:`microdiff.denoiser.denoise`, so the
    same broadcasting rules apply. ``w = 0`` skips the unconditional pass.
    """
    from .denoiser import denoise

    cond = denoise(model, x, level_index, context, microcond, schedule)
    if w == 0:
        return cond
    uncond = denoise(model, x, level_index, null_context, microcond, schedule)
    return (1.0 + w) * cond - w * uncond


def level_subsequence(schedule: NoiseSchedule, steps: int) -> list[int]:
    """``steps`` level indices descending from the top level to the bottom one."""
    if not 1 <= steps <= schedule.num_levels:
        raise ValueError("steps must lie in [1, num_levels]")
    if steps == 1:
        return [schedule.num_levels - 1]
    positions = torch.linspace(schedule.num_levels - 1, 0, steps)
    return sorted({int(round(float(p))) for p in positions}, reverse=True)


def sigma_sequence(schedule: NoiseSchedule, steps: int) -> list[float]:
    """Descending sigmas for the chosen subsequence, with the 0 terminal appended."""
    return [float(schedule.sigmas[i]) for i in level_subsequence(schedule, steps)] + [0.0]


def ddim_core(denoise_fn, sigmas: list[float], x: torch.Tensor) -> torch.Tensor:
    """Deterministic DDIM: at each transition keep the implied noise direction."""
    for hi, lo in zip(sigmas[:-1], sigmas[1:]):
        x0_hat = denoise_fn(x, hi)
        if lo == 0.0:
            x = x0_hat
        else:
            x = x0_hat + (lo / hi) * (x - x0_hat)
    return x


def heun_ode_core(denoise_fn, sigmas: list[float], x: torch.Tensor) -> torch.Tensor:
    """Second-order (Heun) integration of dx/dsigma = (x - D(x; sigma)) / sigma."""
    for hi, lo in zip(sigmas[:-1], sigmas[1:]):
        d_hi = (x - denoise_fn(x, hi)) / hi
        x_euler = x + (lo - hi) * d_hi
        if lo == 0.0:
            x = x_euler
        else:
            d_lo = (x_euler - denoise_fn(x_euler, lo)) / lo
            x = x + (lo - hi) * 0.5 * (d_hi + d_lo)
    return x


def em_sde_core(
    denoise_fn,
    sigmas: list[float],
    sde: SdeConfig,
    x: torch.Tensor,
    rng: torch.Generator,
) -> torch.Tensor:
    """Euler-Maruyama integration of the reverse SDE.

    The drift is the probability-flow term plus a Langevin term
    ``-beta(t) sigma^2 * score`` with matching ``sqrt(2 beta(t)) sigma``
    diffusion; with beta = 0 the path reduces to the Euler ODE path.
    Time runs uniformly from 1 to 0 over the sigma grid.
    """
    n_seg = len(sigmas) - 1
    dt = -1.0 / n_seg
    for k, (hi, lo) in enumerate(zip(sigmas[:-1], sigmas[1:])):
        t = 1.0 + k * dt
        beta = sde.beta_at(t)
        if lo == 0.0:
            x = denoise_fn(x, hi)
            break
        score = (denoise_fn(x, hi) - x) / hi**2
        sigma_dot = (lo - hi) / dt
        drift = -(sigma_dot * hi + beta * hi**2) * score
        x = x + drift * dt
        if beta > 0:
            noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
            x = x + math.sqrt(2.0 * beta * -dt) * hi * noise
    return x


def make_guided_denoise_fn(
    model: Denoiser,
    schedule: NoiseSchedule,
    context: TextContext,
    null_context: TextContext,
    cond_values: torch.Tensor,
    w: float,
):
    """Wrap a model as ``denoise_fn(x, sigma)`` with CFG applied in x0-space."""
    seq = context.sequence[None]
    pooled = context.pooled[None]
    null_seq = null_context.sequence[None]
    null_pooled = null_context.pooled[None]

    def denoise_fn(x: torch.Tensor, sigma: float) -> torch.Tensor:
        b = x.shape[0]
        sig = torch.full((b,), sigma, dtype=x.dtype)
        cv = cond_values.expand(b, -1)
        with torch.no_grad():
            cond = model(x, sig, seq.expand(b, -1, -1), pooled.expand(b, -1), cv)
            if w == 0:
                return cond
            uncond = model(x, sig, null_seq.expand(b, -1, -1), null_pooled.expand(b, -1), cv)
        return (1.0 + w) * cond - w * uncond

    return denoise_fn


def _request_setup(model, schedule, request, encoder, cond_mask=None):
    context = encoder.encode_prompt(request.prompt)
    null_context = encoder.null_context()
    values = torch.tensor([request.microcond.as_values()], dtype=torch.float64)
    if cond_mask is not None:
        use_size, use_crop, use_target = cond_mask
        if not use_size:
            values[:, 0:2] = 0
        if not use_crop:
            values[:, 2:4] = 0
        if not use_target:
            values[:, 4:6] = 0
    denoise_fn = make_guided_denoise_fn(
        model, schedule, context, null_context, values, request.guidance_w
    )
    h, w = request.output_size
    shape = (request.count, model.config.in_channels, h, w)
    rng = torch.Generator().manual_seed(request.seed)
    x = float(schedule.sigmas[-1]) * torch.randn(shape, generator=rng)
    return denoise_fn, x, rng


def _check_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise FloatingPointError(f"non-finite state during {stage}")
    return x


def ddim_sample(model, schedule, request, encoder, cond_mask=None) -> torch.Tensor:
    """Deterministic DDIM samples, (count, C, h_target, w_target)."""
    denoise_fn, x, _ = _request_setup(model, schedule, request, encoder, cond_mask)
    sigmas = sigma_sequence(schedule, request.steps)
    checked = lambda x, s: _check_finite(denoise_fn(x, s), f"ddim at sigma={s:g}")
    return _check_finite(ddim_core(checked, sigmas, x), "ddim output")


def ode_sample(model, schedule, request, encoder, cond_mask=None) -> torch.Tensor:
    """Probability-flow ODE samples via the Heun integrator."""
    denoise_fn, x, _ = _request_setup(model, schedule, request, encoder, cond_mask)
    sigmas = sigma_sequence(schedule, request.steps)
    checked = lambda x, s: _check_finite(denoise_fn(x, s), f"ode at sigma={s:g}")
    return _check_finite(heun_ode_core(checked, sigmas, x), "ode output")


def sde_sample(model, schedule, request, sde: SdeConfig, encoder, cond_mask=None) -> torch.Tensor:
    """Stochastic samples from the reverse SDE (Euler-Maruyama)."""
    denoise_fn, x, rng = _request_setup(model, schedule, request, encoder, cond_mask)
    sigmas = sigma_sequence(schedule, sde.steps)
    checked = lambda x, s: _check_finite(denoise_fn(x, s), f"sde at sigma={s:g}")
    return _check_finite(em_sde_core(checked, sigmas, sde, x, rng), "sde output")


def sample(model, schedule, request, encoder, sde: SdeConfig | None = None, cond_mask=None):
    if request.sampler == "ddim":
        return ddim_sample(model, schedule, request, encoder, cond_mask)
    if request.sampler == "ode":
        return ode_sample(model, schedule, request, encoder, cond_mask)
    return sde_sample(model, schedule, request, sde or SdeConfig(), encoder, cond_mask)


def refine(
    base_latents: torch.Tensor,
    refiner: Denoiser,
    schedule: NoiseSchedule,
    refine_levels: int,
    context: TextContext,
    microcond: MicroCond,
    rng: torch.Generator,
    null_context: TextContext | None = None,
) -> torch.Tensor:
    """Re-noise to the given discrete level and denoise back with the refiner.

    ``refine_levels = 0`` is the bit-exact identity. The refiner runs
    unguided on the same text input and micro-conditioning.
    """
    if not 0 <= refine_levels <= schedule.num_levels:
        raise ValueError("refine_levels out of range")
    if refine_levels == 0:
        return base_latents
    null = null_context if null_context is not None else context
    values = torch.tensor([microcond.as_values()], dtype=torch.float64)
    denoise_fn = make_guided_denoise_fn(refiner, schedule, context, null, values, w=0.0)
    top = refine_levels - 1
    sigma_top = float(schedule.sigmas[top])
    x = base_latents + sigma_top * torch.randn(
        base_latents.shape, generator=rng, dtype=base_latents.dtype
    )
    sigmas = [float(schedule.sigmas[i]) for i in range(top, -1, -1)] + [0.0]
    return _check_finite(ddim_core(denoise_fn, sigmas, x), "refine output")
