"""Fourier feature embeddings and the micro-conditioning pipeline.

A model is conditioned on three integer pairs: the source image's original
size, the crop offset applied during preparation, and the target (bucket)
resolution. Each of the six components is embedded with a Fourier feature
encoding and the blocks are concatenated in a frozen order:

    (h_original, w_original, crop_top, crop_left, h_target, w_target)

Crop offsets are measured in resized-image pixels, the frame in which the
crop physically happens.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

# Frozen block order of the concatenated embedding; serialization and the
# projection layer both depend on it.
COMPONENT_ORDER = ("h_original", "w_original", "crop_top", "crop_left", "h_target", "w_target")

_MICROCOND_STRUCT = struct.Struct("<6I")  # six little-endian unsigned 32-bit ints


@dataclass(frozen=True)
class MicroCond:
    """Original-size, crop-offset and target-size conditioning tuple."""

    size: tuple[int, int]  # (h_original, w_original), before any rescaling
    crop: tuple[int, int]  # (c_top, c_left) in resized-image pixels
    target: tuple[int, int]  # (h_target, w_target)

    def __post_init__(self):
        for value in self.as_values():
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ValueError(f"micro-conditioning components must be non-negative ints, got {value!r}")

    def as_values(self) -> tuple[int, ...]:
        """Components in the frozen order."""
        return (*self.size, *self.crop, *self.target)

    def to_bytes(self) -> bytes:
        return _MICROCOND_STRUCT.pack(*self.as_values())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MicroCond":
        h, w, top, left, ht, wt = _MICROCOND_STRUCT.unpack(raw)
        return cls(size=(h, w), crop=(top, left), target=(ht, wt))

    @classmethod
    def inference_default(cls, size: tuple[int, int], target: tuple[int, int]) -> "MicroCond":
        """Zero crop, the inference-time default for object-centered output."""
        return cls(size=size, crop=(0, 0), target=target)


def fourier_frequencies(half: int) -> torch.Tensor:
    """``half`` frequencies log-spaced from 1 down to 1/10000."""
    if half == 1:
        return torch.ones(1, dtype=torch.float64)
    k = torch.arange(half, dtype=torch.float64)
    return torch.pow(torch.tensor(10000.0, dtype=torch.float64), -k / (half - 1))


def fourier_embed(value, d_f: int) -> torch.Tensor:
    """Embed a scalar (or a tensor of scalars) as [sin(v*w_k), cos(v*w_k)].

    Args:
        value: scalar or tensor of shape (...,); integers or reals.
        d_f: embedding width, must be even and >= 2.

    Returns:
        Tensor of shape (..., d_f); first half sines, second half cosines.
    """
    if d_f < 2 or d_f % 2 != 0:
        raise ValueError("d_f must be an even integer >= 2")
    v = torch.as_tensor(value, dtype=torch.float64)
    freqs = fourier_frequencies(d_f // 2)
    angles = v[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def microcond_features(values: torch.Tensor, d_f: int) -> torch.Tensor:
    """Concatenated per-component embeddings for a (..., 6) tensor of components."""
    v = torch.as_tensor(values, dtype=torch.float64)
    if v.shape[-1] != 6:
        raise ValueError("expected 6 conditioning components")
    blocks = [fourier_embed(v[..., i], d_f) for i in range(6)]
    return torch.cat(blocks, dim=-1)


def embed_microcond(cond: MicroCond, d_f: int) -> torch.Tensor:
    """6*d_f embedding vector for one conditioning tuple, in the frozen order."""
    values = torch.tensor(cond.as_values(), dtype=torch.float64)
    return microcond_features(values, d_f)


def inject_conditioning(
    time_embedding: torch.Tensor,
    cond_embedding: torch.Tensor,
    pooled_text: torch.Tensor,
    projection: torch.nn.Linear,
) -> torch.Tensor:
    """Add the projected (conditioning || pooled-text) vector to the time embedding.

    The projection maps the concatenation to the time-embedding width; a width
    mismatch is a construction-time error of the projection layer.
    """
    joint = torch.cat([cond_embedding, pooled_text], dim=-1).to(time_embedding.dtype)
    if projection.in_features != joint.shape[-1]:
        raise ValueError(
            f"projection expects {projection.in_features} inputs, got {joint.shape[-1]}"
        )
    out = projection(joint)
    if out.shape[-1] != time_embedding.shape[-1]:
        raise ValueError("projection output width must equal time-embedding width")
    return time_embedding + out


def cover_resize_extents(original: tuple[int, int], target: tuple[int, int]) -> tuple[int, int]:
    """Resized extents when the shortest relative side is scaled to match the target.

    The image is scaled by a single factor so it covers the target in both
    axes; the remaining slack along each axis is the valid crop range.
    """
    h0, w0 = original
    ht, wt = target
    if h0 < 1 or w0 < 1 or ht < 1 or wt < 1:
        raise ValueError("extents must be >= 1")
    scale = max(ht / h0, wt / w0)
    hr = max(ht, round(h0 * scale))
    wr = max(wt, round(w0 * scale))
    return hr, wr


def sample_train_conditioning(
    original: tuple[int, int],
    target: tuple[int, int],
    rng: np.random.Generator,
) -> MicroCond:
    """Draw a training-time conditioning tuple for one example.

    The recorded size is the pre-rescale original; crop offsets are uniform
    over the valid integer range [0, resized_extent - target_extent] per axis;
    the target is copied from the bucket.
    """
    hr, wr = cover_resize_extents(original, target)
    ht, wt = target
    top = int(rng.integers(0, hr - ht + 1))
    left = int(rng.integers(0, wr - wt + 1))
    return MicroCond(size=(int(original[0]), int(original[1])), crop=(top, left), target=(int(ht), int(wt)))
