"""Configurable UNet denoiser with per-level transformer depths.

The network predicts the clean signal from a noisy one. Internally it is
preconditioned so that inputs and outputs stay well-scaled across the full
noise range:

    out = c_skip * x + c_out * F(c_in * x, ...)

with the usual variance-based coefficients derived from ``sigma`` and a fixed
``sigma_data``. Transformer depth is configured per resolution level, so a
preset can put zero blocks at the highest feature level and stack many at the
lower ones. Cross-attention consumes the channel-concatenated text context;
the pooled text vector and the micro-conditioning embedding enter through a
linear projection added to the time embedding before the time MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .conditioning import MicroCond, fourier_embed, inject_conditioning, microcond_features
from .schedule import NoiseSchedule
from .textenc import TextContext

# Spreads log-sigma across the sinusoidal frequency bands so adjacent discrete
# levels stay distinguishable at the high-frequency end.
_TIME_SCALE = 100.0


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 4)
    transformer_blocks: tuple[int, ...] = (0, 2, 10)
    num_res_blocks: int = 1
    context_dim: int = 192
    pooled_dim: int = 128
    d_f: int = 256  # Fourier width per micro-conditioning component
    num_heads: int = 4
    groups: int = 8
    sigma_data: float = 0.5

    def __post_init__(self):
        if len(self.channel_mult) != len(self.transformer_blocks):
            raise ValueError("channel_mult and transformer_blocks must have equal length")
        if self.base_channels % self.groups != 0:
            raise ValueError("base_channels must be divisible by groups")
        if self.base_channels % 2 != 0:
            raise ValueError("base_channels must be even")
        for mult, depth in zip(self.channel_mult, self.transformer_blocks):
            if depth > 0 and (self.base_channels * mult) % self.num_heads != 0:
                raise ValueError("attention channels must be divisible by num_heads")

    @property
    def num_levels(self) -> int:
        return len(self.channel_mult)

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mult)

    @classmethod
    def hetero(cls, **overrides) -> "DenoiserConfig":
        """Three-level layout: no transformers at the top level, 2 and 10 below."""
        return cls(**{"channel_mult": (1, 2, 4), "transformer_blocks": (0, 2, 10), **overrides})

    @classmethod
    def uniform(cls, **overrides) -> "DenoiserConfig":
        """Four-level layout with one transformer block at every level."""
        return cls(**{"channel_mult": (1, 2, 4, 4), "transformer_blocks": (1, 1, 1, 1), **overrides})

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_mult": list(self.channel_mult),
            "transformer_blocks": list(self.transformer_blocks),
            "num_res_blocks": self.num_res_blocks,
            "context_dim": self.context_dim,
            "pooled_dim": self.pooled_dim,
            "d_f": self.d_f,
            "num_heads": self.num_heads,
            "groups": self.groups,
            "sigma_data": self.sigma_data,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        d["transformer_blocks"] = tuple(d["transformer_blocks"])
        return cls(**d)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Attention(nn.Module):
    """Multi-head attention over token sequences; cross when kv_dim differs."""

    def __init__(self, channels: int, kv_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(kv_dim, channels, bias=False)
        self.to_v = nn.Linear(kv_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, context=None):
        context = x if context is None else context
        b, n, c = x.shape
        q = self.to_q(x).view(b, n, self.heads, c // self.heads).transpose(1, 2)
        k = self.to_k(context).view(b, context.shape[1], self.heads, c // self.heads).transpose(1, 2)
        v = self.to_v(context).view(b, context.shape[1], self.heads, c // self.heads).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, n, c)
        return self.to_out(out)


class TransformerBlock(nn.Module):
    """Self-attention, cross-attention on the text context, then an MLP."""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn_self = Attention(channels, channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.attn_cross = Attention(channels, context_dim, heads)
        self.norm3 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels)
        )

    def forward(self, x, context):
        x = x + self.attn_self(self.norm1(x))
        x = x + self.attn_cross(self.norm2(x), context)
        x = x + self.mlp(self.norm3(x))
        return x


class SpatialTransformer(nn.Module):
    """Stack of transformer blocks applied to flattened spatial tokens."""

    def __init__(self, channels: int, depth: int, context_dim: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.proj_in = nn.Linear(channels, channels)
        self.blocks = nn.ModuleList(
            TransformerBlock(channels, context_dim, heads) for _ in range(depth)
        )
        self.proj_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.norm(x).permute(0, 2, 3, 1).reshape(b, h * w, c)
        tokens = self.proj_in(tokens)
        for block in self.blocks:
            tokens = block(tokens, context)
        tokens = self.proj_out(tokens)
        return x + tokens.reshape(b, h, w, c).permute(0, 3, 1, 2)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class _Level(nn.Module):
    """One resolution level: res blocks, optional transformer stacks, resampler."""

    def __init__(self, res_blocks, transformers, resample):
        super().__init__()
        self.res_blocks = nn.ModuleList(res_blocks)
        self.transformers = nn.ModuleList(transformers)
        self.resample = resample


class Denoiser(nn.Module):
    """UNet clean-signal predictor. See module docstring for conventions."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        chans = cfg.level_channels
        time_sin = cfg.base_channels
        time_dim = 4 * cfg.base_channels
        self.time_dim = time_dim

        self.cond_proj = nn.Linear(6 * cfg.d_f + cfg.pooled_dim, time_sin, bias=False)
        self.time_mlp = nn.Sequential(
            nn.Linear(time_sin, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )

        def transformer(ch: int, depth: int) -> SpatialTransformer:
            return SpatialTransformer(ch, depth, cfg.context_dim, cfg.num_heads, cfg.groups)

        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        skip_chans = [chans[0]]
        self.down = nn.ModuleList()
        ch = chans[0]
        for lvl, (out_ch, depth) in enumerate(zip(chans, cfg.transformer_blocks)):
            blocks, stacks = [], []
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(ch, out_ch, time_dim, cfg.groups))
                stacks.append(transformer(out_ch, depth) if depth > 0 else None)
                ch = out_ch
                skip_chans.append(ch)
            resample = None
            if lvl < cfg.num_levels - 1:
                resample = Downsample(ch)
                skip_chans.append(ch)
            self.down.append(_Level(blocks, [s for s in stacks if s is not None] or [], resample))
            # keep per-block stack placement alongside its res block
            self.down[-1].stack_map = [s is not None for s in stacks]

        self.mid_block1 = ResBlock(ch, ch, time_dim, cfg.groups)
        self.mid_transformer = (
            transformer(ch, 1) if cfg.transformer_blocks[-1] > 0 else None
        )
        self.mid_block2 = ResBlock(ch, ch, time_dim, cfg.groups)

        self.up = nn.ModuleList()
        for lvl in reversed(range(cfg.num_levels)):
            out_ch, depth = chans[lvl], cfg.transformer_blocks[lvl]
            blocks, stacks = [], []
            for _ in range(cfg.num_res_blocks + 1):
                blocks.append(ResBlock(ch + skip_chans.pop(), out_ch, time_dim, cfg.groups))
                stacks.append(transformer(out_ch, depth) if depth > 0 else None)
                ch = out_ch
            resample = Upsample(ch) if lvl > 0 else None
            level = _Level(blocks, [s for s in stacks if s is not None] or [], resample)
            level.stack_map = [s is not None for s in stacks]
            self.up.append(level)

        self.out_norm = nn.GroupNorm(cfg.groups, ch)
        self.out_conv = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def backbone(self, x, sigma, context, pooled, cond_values):
        """Raw network output F before preconditioning is applied."""
        b = x.shape[0]
        time_feat = fourier_embed(_TIME_SCALE * torch.log(sigma), self.config.base_channels)
        time_feat = time_feat.to(x.dtype)
        cond_vec = microcond_features(cond_values, self.config.d_f).to(x.dtype)
        time_feat = inject_conditioning(time_feat, cond_vec, pooled.to(x.dtype), self.cond_proj)
        temb = self.time_mlp(time_feat)

        h = self.conv_in(x)
        skips = [h]
        for level in self.down:
            stacks = iter(level.transformers)
            for block, has_stack in zip(level.res_blocks, level.stack_map):
                h = block(h, temb)
                if has_stack:
                    h = next(stacks)(h, context)
                skips.append(h)
            if level.resample is not None:
                h = level.resample(h)
                skips.append(h)

        h = self.mid_block1(h, temb)
        if self.mid_transformer is not None:
            h = self.mid_transformer(h, context)
        h = self.mid_block2(h, temb)

        for level in self.up:
            stacks = iter(level.transformers)
            for block, has_stack in zip(level.res_blocks, level.stack_map):
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
                if has_stack:
                    h = next(stacks)(h, context)
            if level.resample is not None:
                h = level.resample(h)

        return self.out_conv(F.silu(self.out_norm(h)))

    def forward(self, x, sigma, context, pooled, cond_values):
        """Predict the clean signal.

        Args:
            x: noisy input (batch, channels, height, width).
            sigma: per-sample noise magnitudes, scalar or (batch,).
            context: text context (batch, tokens, context_dim).
            pooled: pooled text vector (batch, pooled_dim).
            cond_values: six micro-conditioning components (batch, 6).
        """
        sigma = torch.as_tensor(sigma, dtype=x.dtype)
        if sigma.dim() == 0:
            sigma = sigma.expand(x.shape[0])
        sig = sigma.view(-1, 1, 1, 1)
        sd2 = self.config.sigma_data**2
        c_in = 1.0 / torch.sqrt(sig**2 + sd2)
        c_skip = sd2 / (sig**2 + sd2)
        c_out = sig * self.config.sigma_data / torch.sqrt(sig**2 + sd2)
        raw = self.backbone(c_in * x, sigma, context, pooled, cond_values)
        return c_skip * x + c_out * raw


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Construct a denoiser with deterministic, seed-controlled initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Denoiser(config)


def denoise(
    model: Denoiser,
    x_t: torch.Tensor,
    level_index,
    context: TextContext,
    microcond: MicroCond,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Clean-signal prediction at one (or per-sample) discrete noise level.

    Accepts a single TextContext/MicroCond and broadcasts them over the batch,
    or pre-batched tensors in their place.
    """
    squeeze = x_t.dim() == 3
    if squeeze:
        x_t = x_t[None]
    if x_t.dim() != 4:
        raise ValueError("expected (batch, channels, height, width) input")
    if x_t.shape[1] != model.config.in_channels:
        raise ValueError(f"expected {model.config.in_channels} channels, got {x_t.shape[1]}")
    factor = 2 ** (model.config.num_levels - 1)
    if x_t.shape[-2] % factor or x_t.shape[-1] % factor:
        raise ValueError(f"spatial dims must be divisible by {factor}")
    if not bool(torch.isfinite(x_t).all()):
        raise ValueError("non-finite input")

    b = x_t.shape[0]
    levels = torch.as_tensor(level_index, dtype=torch.long)
    if bool((levels < 0).any()) or bool((levels >= schedule.num_levels).any()):
        raise IndexError("level index out of range")
    sigma = schedule.sigmas[levels].to(x_t.dtype)

    if isinstance(context, TextContext):
        seq = context.sequence[None].expand(b, -1, -1)
        pooled = context.pooled[None].expand(b, -1)
    else:
        seq, pooled = context
    if isinstance(microcond, MicroCond):
        cond_values = torch.tensor([microcond.as_values()], dtype=torch.float64).expand(b, -1)
    else:
        cond_values = torch.as_tensor(microcond)

    out = model(x_t, sigma, seq, pooled, cond_values)
    return out[0] if squeeze else out


def score_from_denoiser(x_hat0: torch.Tensor, x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Score estimate ``(x_hat0 - x) / sigma**2`` implied by a clean prediction."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return (x_hat0 - x) / (sigma**2)
