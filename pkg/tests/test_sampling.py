import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from microdiff.conditioning import MicroCond
from microdiff.denoiser import build_denoiser
from microdiff.sampling import (
    SampleRequest,
    SdeConfig,
    cfg_denoise,
    ddim_core,
    ddim_sample,
    em_sde_core,
    heun_ode_core,
    level_subsequence,
    make_guided_denoise_fn,
    refine,
    sample,
    sigma_sequence,
)
from microdiff.schedule import build_schedule
from microdiff.textenc import DualTextEncoder, TextContext

from test_denoiser import TINY, randomize_zero_layers


@pytest.fixture(scope="module")
def sched():
    return build_schedule(1000, 1e-4, 2e-2)


@pytest.fixture(scope="module")
def model():
    return randomize_zero_layers(build_denoiser(TINY, seed=0))


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(1)
    return DualTextEncoder(d_a=4, d_b=8, max_len=8, heads=2)


def gaussian_denoiser(s):
    """Optimal clean-signal predictor for N(0, s^2) data."""

    def fn(x, sigma):
        return (s * s / (s * s + sigma * sigma)) * x

    return fn


class GaussianStubModel:
    """Denoiser-shaped callable implementing the analytic Gaussian predictor."""

    def __init__(self, s, in_channels=1):
        self.s = s
        self.config = SimpleNamespace(in_channels=in_channels)

    def __call__(self, x, sigma, seq, pooled, cond_values):
        sig = torch.as_tensor(sigma, dtype=x.dtype).view(-1, *([1] * (x.dim() - 1)))
        return (self.s**2 / (self.s**2 + sig**2)) * x

    def eval(self):
        return self


def dummy_context(dim=12, pooled=8):
    return TextContext(sequence=torch.zeros(4, dim), pooled=torch.zeros(pooled))


def test_cfg_w_zero_is_conditional(model, encoder, sched):
    ctx = encoder.encode_prompt("a blob")
    null = encoder.null_context()
    x = torch.randn(2, 1, 8, 8)
    cond = MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8))
    from microdiff.denoiser import denoise

    guided = cfg_denoise(model, x, 500, ctx, null, 0.0, cond, sched)
    assert torch.equal(guided, denoise(model, x, 500, ctx, cond, sched))


def test_cfg_w_one_substitution(model, encoder, sched):
    ctx = encoder.encode_prompt("a blob")
    null = encoder.null_context()
    x = torch.randn(2, 1, 8, 8)
    cond = MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8))
    from microdiff.denoiser import denoise

    d_c = denoise(model, x, 500, ctx, cond, sched)
    d_u = denoise(model, x, 500, null, cond, sched)
    guided = cfg_denoise(model, x, 500, ctx, null, 1.0, cond, sched)
    assert torch.allclose(guided, 2.0 * d_c - d_u, rtol=1e-6, atol=1e-6)


def test_cfg_affine_in_w(model, encoder, sched):
    ctx = encoder.encode_prompt("a blob")
    null = encoder.null_context()
    x = torch.randn(2, 1, 8, 8)
    cond = MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8))
    v0 = cfg_denoise(model, x, 500, ctx, null, 0.0, cond, sched)
    v1 = cfg_denoise(model, x, 500, ctx, null, 1.0, cond, sched)
    v2 = cfg_denoise(model, x, 500, ctx, null, 2.0, cond, sched)
    assert torch.allclose(v2, 2.0 * v1 - v0, rtol=1e-5, atol=1e-6)


def test_cfg_null_equals_cond_collapses(model, encoder, sched):
    ctx = encoder.encode_prompt("a blob")
    x = torch.randn(2, 1, 8, 8)
    cond = MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8))
    from microdiff.denoiser import denoise

    base = denoise(model, x, 500, ctx, cond, sched)
    for w in (0.0, 1.0, 5.0):
        guided = cfg_denoise(model, x, 500, ctx, ctx, w, cond, sched)
        assert torch.allclose(guided, base, rtol=1e-5, atol=1e-6)


def test_level_subsequence_properties(sched):
    full = level_subsequence(sched, 1000)
    assert full == list(range(999, -1, -1))
    assert level_subsequence(sched, 1) == [999]
    sub = level_subsequence(sched, 50)
    assert sub[0] == 999 and sub[-1] == 0
    assert all(a > b for a, b in zip(sub, sub[1:]))
    with pytest.raises(ValueError):
        level_subsequence(sched, 1001)


def test_sigma_sequence_terminates_at_zero(sched):
    seq = sigma_sequence(sched, 10)
    assert seq[-1] == 0.0
    assert all(a > b for a, b in zip(seq, seq[1:]))


def test_ddim_full_steps_gaussian_oracle(sched):
    s = 1.0
    g = torch.Generator().manual_seed(0)
    x = float(sched.sigmas[-1]) * torch.randn(10_000, dtype=torch.float64, generator=g)
    out = ddim_core(gaussian_denoiser(s), sigma_sequence(sched, 1000), x)
    assert float(out.var()) == pytest.approx(s * s, rel=0.03)


def test_heun_ode_gaussian_oracle(sched):
    s = 1.0
    g = torch.Generator().manual_seed(1)
    x = float(sched.sigmas[-1]) * torch.randn(10_000, dtype=torch.float64, generator=g)
    out = heun_ode_core(gaussian_denoiser(s), sigma_sequence(sched, 100), x)
    assert float(out.var()) == pytest.approx(s * s, rel=0.02)


def test_heun_second_order_convergence(sched):
    # against the exact Gaussian flow map, halving the step size should cut
    # the error by roughly 4x
    s = 1.0
    sigma_max = float(sched.sigmas[-1])
    x0 = torch.linspace(-3, 3, 501, dtype=torch.float64) * sigma_max
    exact = x0 * math.sqrt(s * s / (s * s + sigma_max**2))
    errs = {}
    for steps in (25, 50, 100):
        out = heun_ode_core(gaussian_denoiser(s), sigma_sequence(sched, steps), x0)
        errs[steps] = float((out - exact).abs().max())
    assert errs[25] / errs[50] > 3.0
    assert errs[50] / errs[100] > 3.0


def test_zero_score_keeps_state_constant(sched):
    # denoiser returning its input means zero score: dx = 0 along the ODE
    x = torch.randn(64, dtype=torch.float64)
    out = heun_ode_core(lambda x, sigma: x, sigma_sequence(sched, 20)[:-1] + [], x.clone())
    assert torch.allclose(out, x, rtol=1e-12)


def test_sde_gaussian_oracle(sched):
    s = 1.0
    g = torch.Generator().manual_seed(2)
    x = float(sched.sigmas[-1]) * torch.randn(10_000, dtype=torch.float64, generator=g)
    out = em_sde_core(gaussian_denoiser(s), sigma_sequence(sched, 200), SdeConfig(beta=1.0), x, g)
    assert float(out.var()) == pytest.approx(s * s, rel=0.05)


def test_sde_beta_zero_reduces_to_euler_ode(sched):
    g = torch.Generator().manual_seed(3)
    x = float(sched.sigmas[-1]) * torch.randn(128, dtype=torch.float64, generator=g)
    fn = gaussian_denoiser(0.8)
    out = em_sde_core(fn, sigma_sequence(sched, 50), SdeConfig(beta=0.0), x.clone(), g)
    euler = x.clone()
    seq = sigma_sequence(sched, 50)
    for hi, lo in zip(seq[:-1], seq[1:]):
        euler = fn(euler, hi) if lo == 0.0 else euler + (lo - hi) * (euler - fn(euler, hi)) / hi
    assert torch.allclose(out, euler, rtol=1e-12, atol=1e-12)


def test_sde_two_seeds_distinct_same_moments(sched):
    s = 1.0
    outs = []
    for seed in (10, 11):
        g = torch.Generator().manual_seed(seed)
        x = float(sched.sigmas[-1]) * torch.randn(10_000, dtype=torch.float64, generator=g)
        outs.append(em_sde_core(gaussian_denoiser(s), sigma_sequence(sched, 100), SdeConfig(beta=1.0), x, g))
    a, b = outs
    assert not torch.allclose(a, b)
    assert float(a.mean()) == pytest.approx(float(b.mean()), abs=0.05)
    assert float(a.var()) == pytest.approx(float(b.var()), rel=0.10)


def test_negative_beta_rejected(sched):
    with pytest.raises(ValueError):
        em_sde_core(
            gaussian_denoiser(1.0),
            sigma_sequence(sched, 10),
            SdeConfig(beta=lambda t: -1.0),
            torch.randn(4),
            torch.Generator(),
        )


def test_samplers_agree_on_gaussian_oracle(sched):
    # distribution-level equivalence of the deterministic and stochastic routes
    s = 0.7
    outs = {}
    for name, steps, runner in (
        ("ddim", 1000, lambda fn, sig, x, g: ddim_core(fn, sig, x)),
        ("ode", 100, lambda fn, sig, x, g: heun_ode_core(fn, sig, x)),
        ("sde", 200, lambda fn, sig, x, g: em_sde_core(fn, sig, SdeConfig(beta=1.0), x, g)),
    ):
        g = torch.Generator().manual_seed(4)
        x = float(sched.sigmas[-1]) * torch.randn(10_000, dtype=torch.float64, generator=g)
        outs[name] = runner(gaussian_denoiser(s), sigma_sequence(sched, steps), x, g)
    for out in outs.values():
        assert abs(float(out.mean())) < 0.05
        assert float(out.var()) == pytest.approx(s * s, rel=0.05)


def test_request_validation():
    cond = MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8))
    with pytest.raises(ValueError):
        SampleRequest(microcond=cond, steps=0)
    with pytest.raises(ValueError):
        SampleRequest(microcond=cond, guidance_w=-1.0)
    with pytest.raises(ValueError):
        SampleRequest(microcond=cond, sampler="plms")


def test_ddim_sample_deterministic(model, encoder, sched):
    req = SampleRequest(
        prompt="blob", microcond=MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8)),
        guidance_w=1.0, steps=8, sampler="ddim", seed=9, count=2,
    )
    a = ddim_sample(model, sched, req, encoder)
    b = ddim_sample(model, sched, req, encoder)
    assert torch.equal(a, b)
    assert a.shape == (2, 1, 8, 8)
    other = ddim_sample(model, sched, req.__class__(**{**req.__dict__, "seed": 10}), encoder)
    assert not torch.allclose(a, other)


def test_sample_dispatch(model, encoder, sched):
    for sampler in ("ddim", "ode", "sde"):
        req = SampleRequest(
            prompt="x", microcond=MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8)),
            guidance_w=0.0, steps=6, sampler=sampler, seed=1, count=1,
        )
        out = sample(model, sched, req, encoder, sde=SdeConfig(beta=1.0, steps=6))
        assert out.shape == (1, 1, 8, 8)
        assert bool(torch.isfinite(out).all())


def test_nonfinite_state_aborts(encoder, sched):
    class _PoisonModel:
        config = SimpleNamespace(in_channels=1)

        def __call__(self, x, sigma, seq, pooled, cv):
            return torch.full_like(x, float("inf"))

    req = SampleRequest(
        prompt="x", microcond=MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8)),
        guidance_w=0.0, steps=4, sampler="ddim", seed=0,
    )
    with pytest.raises(FloatingPointError, match="sigma"):
        ddim_sample(_PoisonModel(), sched, req, encoder)


def test_refine_zero_levels_identity(sched):
    stub = GaussianStubModel(1.0)
    base = torch.randn(3, 1, 8, 8)
    out = refine(base, stub, sched, 0, dummy_context(), MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8)),
                 torch.Generator().manual_seed(0))
    assert out is base  # bit-exact no-op


def test_refine_level_bounds(sched):
    stub = GaussianStubModel(1.0)
    cond = MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8))
    with pytest.raises(ValueError):
        refine(torch.randn(1, 1, 8, 8), stub, sched, 1001, dummy_context(), cond, torch.Generator())


def test_refine_gaussian_oracle_preserves_moments(sched):
    # base latents from N(0, s^2); re-noising at level 200 and denoising with
    # the analytic refiner must return to the same distribution
    s = 1.0
    g = torch.Generator().manual_seed(5)
    base = s * torch.randn(10_000, 1, 1, 1, dtype=torch.float64, generator=g)
    stub = GaussianStubModel(s)
    cond = MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8))
    out = refine(base, stub, sched, 200, dummy_context(), cond, g)
    assert abs(float(out.mean())) < 0.05
    assert float(out.var()) == pytest.approx(s * s, rel=0.05)


def test_guided_denoise_fn_matches_direct(model, encoder, sched):
    ctx = encoder.encode_prompt("blob")
    null = encoder.null_context()
    cv = torch.tensor([[8, 8, 0, 0, 8, 8]], dtype=torch.float64)
    fn = make_guided_denoise_fn(model, sched, ctx, null, cv, w=2.0)
    x = torch.randn(3, 1, 8, 8)
    sigma = float(sched.sigmas[500])
    cond = MicroCond(size=(8, 8), crop=(0, 0), target=(8, 8))
    direct = cfg_denoise(model, x, 500, ctx, null, 2.0, cond, sched)
    assert torch.allclose(fn(x, sigma), direct, rtol=1e-5, atol=1e-6)
