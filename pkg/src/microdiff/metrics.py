"""Feature statistics, Frechet distance, and image property metrics.

The Frechet distance runs over pluggable feature extractors (raw pixels,
random projections, or autoencoder latents) rather than a fixed pretrained
backbone, so it measures distributional agreement of whatever features the
caller chooses, not a quality verdict.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d), symmetric
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("count must be >= 2")
        if self.mean.ndim != 1 or self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean/cov shape mismatch")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_bytes(self) -> bytes:
        """Compact record: dim, count, mean, packed upper-triangular covariance."""
        d = self.dim
        iu = np.triu_indices(d)
        payload = struct.pack("<II", d, self.count)
        payload += self.mean.astype("<f8").tobytes()
        payload += np.ascontiguousarray(self.cov[iu]).astype("<f8").tobytes()
        return payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FeatureStats":
        d, count = struct.unpack_from("<II", raw, 0)
        offset = 8
        mean = np.frombuffer(raw, dtype="<f8", count=d, offset=offset).copy()
        offset += 8 * d
        tri = np.frombuffer(raw, dtype="<f8", count=d * (d + 1) // 2, offset=offset)
        cov = np.zeros((d, d))
        iu = np.triu_indices(d)
        cov[iu] = tri
        cov = cov + np.triu(cov, 1).T
        return cls(mean=mean, cov=cov, count=count)


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Unbiased sample mean and covariance of an (n, d) feature matrix."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need an (n >= 2, d) feature matrix")
    mean = f.mean(axis=0)
    cov = np.cov(f, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return FeatureStats(mean=mean, cov=cov, count=f.shape[0])


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition (negatives clipped)."""
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet (2-Wasserstein) distance between feature Gaussians.

    ||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)), computed
    through the symmetrized product for numerical stability.
    """
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    sa = sqrtm_psd(a.cov)
    middle = sqrtm_psd(sa @ b.cov @ sa)
    value = float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(middle))
    if value < -1e-6:
        raise FloatingPointError(f"Frechet distance evaluated to {value}; square root failed")
    return max(value, 0.0)


def highfreq_energy(image: np.ndarray) -> float:
    """Fraction of (mean-removed) spectral power above half the Nyquist radius.

    Multi-channel inputs are averaged to grayscale first. A constant image has
    no non-DC power and scores 0.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0 if img.shape[0] <= 4 else -1)
    if img.ndim != 2 or min(img.shape) < 2:
        raise ValueError("need a 2-D image with both sides >= 2")
    img = img - img.mean()
    power = np.abs(np.fft.fft2(img)) ** 2
    total = power.sum()
    if total == 0:
        return 0.0
    fy = np.fft.fftfreq(img.shape[0])[:, None]
    fx = np.fft.fftfreq(img.shape[1])[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    return float(power[radius > 0.25].sum() / total)


def center_of_mass(image: np.ndarray) -> tuple[float, float]:
    """Intensity-weighted centroid (row, col) of a non-negative image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0 if img.shape[0] <= 4 else -1)
    if bool((img < 0).any()):
        raise ValueError("intensities must be non-negative")
    total = img.sum()
    if total == 0:
        raise ValueError("all-zero image has no center of mass")
    rows = np.arange(img.shape[0])[:, None]
    cols = np.arange(img.shape[1])[None, :]
    return float((img * rows).sum() / total), float((img * cols).sum() / total)


class PixelFeatures:
    """Flattened raw pixels, optionally strided down to bound the dimension."""

    def __init__(self, stride: int = 1):
        self.stride = stride
        self.name = f"pixels[stride={stride}]"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        x = x[..., :: self.stride, :: self.stride]
        return x.reshape(x.shape[0], -1)


class RandomProjectionFeatures:
    """Fixed random linear projection of flattened pixels."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
        self.name = f"randproj[{out_dim},seed={seed}]"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(images.shape[0], -1)
        return x @ self.matrix


class AutoencoderFeatures:
    """Grid-pooled autoencoder latents plus per-channel spread.

    Latent maps are average-pooled to a small grid so the features keep
    coarse spatial structure; channel standard deviations add a texture cue.
    """

    def __init__(self, ae, grid: int = 3):
        self.ae = ae
        self.grid = grid
        self.name = f"ae-latents[grid={grid}]"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            z = self.ae.encode(torch.as_tensor(np.asarray(images), dtype=torch.float32))
        pooled = torch.nn.functional.adaptive_avg_pool2d(z, self.grid).flatten(1)
        std = z.std(dim=(2, 3))
        return torch.cat([pooled, std], dim=1).double().numpy()
