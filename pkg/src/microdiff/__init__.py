"""microdiff: a desk-scale diffusion toolkit.

Library layout:
    schedule      discrete noise levels, noising operator, loss weights
    conditioning  Fourier embeddings and size/crop/target micro-conditioning
    textenc       toy dual text encoder (channel-concatenated contexts)
    denoiser      UNet denoiser with per-level transformer depths
    autoencoder   small conv autoencoder + reconstruction metrics
    data          manifests, multi-aspect buckets, example preparation
    train         DSM loss, CFG dropout, EMA, staged training loop
    sampling      CFG, DDIM / probability-flow ODE / SDE samplers, refinement
    metrics       feature statistics, Frechet distance, image property metrics
    checkpoint    self-describing binary checkpoint container
    cli           command-line interface
"""

__version__ = "0.1.0"
