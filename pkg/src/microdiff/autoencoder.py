"""Small convolutional autoencoder defining the latent space.

The encoder halves the spatial resolution ``log2(downsample_factor)`` times;
the decoder mirrors it and ends in a sigmoid so reconstructions live in
[0, 1]. Weights are tracked with an exponential moving average during
training and the EMA copy is what encodes data for diffusion training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import uniform_filter
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 4
    base_channels: int = 32

    def __post_init__(self):
        if self.downsample_factor not in (2, 4, 8):
            raise ValueError("downsample_factor must be one of {2, 4, 8}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "latent_channels": self.latent_channels,
            "downsample_factor": self.downsample_factor,
            "base_channels": self.base_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderConfig":
        return cls(**d)


class ConvAutoencoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        stages = int(math.log2(config.downsample_factor))
        ch = config.base_channels

        enc = [nn.Conv2d(config.in_channels, ch, 3, padding=1), nn.SiLU()]
        cur = ch
        for _ in range(stages):
            enc += [nn.Conv2d(cur, cur * 2, 3, stride=2, padding=1), nn.SiLU()]
            cur *= 2
        enc += [nn.Conv2d(cur, config.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(config.latent_channels, cur, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(cur, cur // 2, 3, padding=1),
                nn.SiLU(),
            ]
            cur //= 2
        dec += [nn.Conv2d(cur, config.in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        """Map (batch, C, H, W) pixels to (batch, latent, H/f, W/f) latents."""
        f = self.config.downsample_factor
        if pixels.shape[-2] % f or pixels.shape[-1] % f:
            raise ValueError(f"spatial dims must be divisible by {f}")
        return self.encoder(pixels)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(latents))

    def forward(self, pixels):
        return self.decode(self.encode(pixels))


def build_autoencoder(config: AutoencoderConfig, seed: int = 0) -> ConvAutoencoder:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ConvAutoencoder(config)


def parameter_fingerprint(module: nn.Module) -> str:
    """Cheap content hash of all parameters; detects any weight mutation."""
    import hashlib

    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def train_autoencoder(
    ae: ConvAutoencoder,
    images: torch.Tensor,
    steps: int,
    batch_size: int,
    rng: torch.Generator,
    lr: float = 2e-3,
    ema_decay: float = 0.999,
) -> ConvAutoencoder:
    """MSE-train the autoencoder and return an EMA copy of it.

    ``batch_size`` is an explicit knob so large-batch vs small-batch runs can
    be compared; the returned EMA module is the one to encode with.
    """
    from .train import EmaTracker

    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    ema = EmaTracker(ae, decay=ema_decay)
    n = images.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=rng)
        batch = images[idx]
        recon = ae(batch)
        loss = F.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema.update(ae)
    ema_ae = ConvAutoencoder(ae.config)
    ema_ae.load_state_dict(ae.state_dict())
    ema.copy_to(ema_ae)
    ema_ae.eval()
    for p in ema_ae.parameters():
        p.requires_grad_(False)
    return ema_ae


def _ssim(x: np.ndarray, y: np.ndarray, window: int = 7) -> float:
    """Mean structural similarity with a uniform window, data range 1.0."""
    c1, c2 = 0.01**2, 0.03**2
    mode = {"mode": "reflect"}
    mx = uniform_filter(x, size=window, **mode)
    my = uniform_filter(y, size=window, **mode)
    mxx = uniform_filter(x * x, size=window, **mode)
    myy = uniform_filter(y * y, size=window, **mode)
    mxy = uniform_filter(x * y, size=window, **mode)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def recon_metrics(x, x_hat) -> dict:
    """PSNR / SSIM / MSE between two same-shape images with values in [0, 1].

    A perfect reconstruction reports ``psnr=inf``.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return {"mse": mse, "psnr": psnr, "ssim": _ssim(a, b)}
