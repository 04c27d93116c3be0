"""Shared fixtures, including the trained-model experiment used by the
acceptance suite.

The experiment fixture trains one fully conditioned model, a no-conditioning
baseline, a baseline trained only on the large-size subset, a refiner
specialized on the lowest noise levels, and a feature autoencoder, all on the
synthetic blob dataset. Set MICRODIFF_EXPT_CACHE=<dir> to reuse trained
weights across pytest runs while iterating; the cache stores package
checkpoints and is entirely optional.
"""

from __future__ import annotations

import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch

import blobworld
from microdiff.autoencoder import AutoencoderConfig, ConvAutoencoder, build_autoencoder, train_autoencoder
from microdiff.conditioning import MicroCond
from microdiff.data import DatasetManifest
from microdiff.denoiser import Denoiser, DenoiserConfig
from microdiff.sampling import SampleRequest, ddim_sample, refine
from microdiff.schedule import build_schedule
from microdiff.textenc import DualTextEncoder
from microdiff.train import (
    StageConfig,
    TrainConfig,
    load_train_state,
    new_train_state,
    run_stage,
    save_train_state,
)

EXPT_MODEL = DenoiserConfig(
    in_channels=1, base_channels=12, channel_mult=(1, 2), transformer_blocks=(0, 0),
    num_res_blocks=1, context_dim=24, pooled_dim=16, d_f=16, num_heads=4, groups=4,
)
EXPT_AE = AutoencoderConfig(in_channels=1, latent_channels=6, downsample_factor=2, base_channels=24)
TARGET = (24, 24)
N_SAMPLES = 200
SAMPLE_STEPS = 60

LARGE = blobworld.LARGE_SIZE
SMALL = blobworld.SMALL_SIZE
MAX_CROP = (0, blobworld.SCENE_W - blobworld.SCENE_H)  # no vertical slack in this data


def _say(msg: str) -> None:
    print(f"[experiment] {msg}", file=sys.stderr, flush=True)


@dataclass
class Experiment:
    schedule: object
    encoder: DualTextEncoder
    manifest: DatasetManifest
    holdout: DatasetManifest
    models: dict
    masks: dict
    autoencoder: ConvAutoencoder
    cond_losses: list[float]
    samples: dict = field(default_factory=dict)

    def draw(self, model_name: str, microcond: MicroCond, seed: int, count: int = N_SAMPLES):
        key = (model_name, microcond.as_values(), seed, count)
        if key not in self.samples:
            request = SampleRequest(
                prompt="blob", microcond=microcond, guidance_w=0.0,
                steps=SAMPLE_STEPS, sampler="ddim", seed=seed, count=count,
            )
            t0 = time.monotonic()
            self.samples[key] = ddim_sample(
                self.models[model_name], self.schedule, request, self.encoder,
                cond_mask=self.masks[model_name],
            )
            _say(f"sampled {count} from {model_name} in {time.monotonic() - t0:.0f}s")
        return self.samples[key]


def _train_one(name, manifest, schedule, encoder, steps, seed, flags, level_range, cache_dir):
    cache = Path(cache_dir) / f"{name}.ckpt" if cache_dir else None
    if cache is not None and cache.exists():
        state, _ = load_train_state(cache)
        _say(f"loaded cached {name}")
        return state
    cfg = TrainConfig(
        seed=seed, ema_decay=0.995,
        use_size_cond=flags[0], use_crop_cond=flags[1], use_target_cond=flags[2],
        stages=(
            StageConfig(
                name=name, steps=steps, batch_size=12, resolution=TARGET[0],
                lr=2e-3, cfg_dropout_p=0.1, level_range=level_range,
            ),
        ),
    )
    state = new_train_state(cfg, EXPT_MODEL, schedule, encoder)
    t0 = time.monotonic()
    import io

    log = io.StringIO()
    run_stage(state, cfg.stages[0], manifest, log_fh=log)
    _say(f"trained {name}: {steps} steps in {time.monotonic() - t0:.0f}s")
    state._losses = [
        float(line.split("loss=")[1].split()[0])
        for line in log.getvalue().splitlines()
        if line.startswith("step=")
    ]
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_train_state(cache, state, EXPT_MODEL)
    return state


@pytest.fixture(scope="session")
def expt() -> Experiment:
    cache_dir = os.environ.get("MICRODIFF_EXPT_CACHE", "")
    rng = np.random.default_rng(0)
    manifest = blobworld.make_blob_manifest(220, rng, small_frac=0.5)
    sharp = blobworld.sharp_only(manifest)
    holdout = DatasetManifest(
        entries=tuple(blobworld.make_entry(rng, 10_000 + i, small=False) for i in range(130))
    )
    _say(f"dataset: train={len(manifest)} (sharp={len(sharp)}) holdout={len(holdout)}")

    schedule = build_schedule(1000, 1e-4, 2e-2)
    with torch.random.fork_rng():
        torch.manual_seed(99)
        encoder = DualTextEncoder(d_a=8, d_b=16, max_len=8, heads=4)

    cond_state = _train_one("cond", manifest, schedule, encoder, 3500, 0, (True, True, True), None, cache_dir)
    nocond_state = _train_one("nocond", manifest, schedule, encoder, 2000, 1, (False, False, False), None, cache_dir)
    discard_state = _train_one("discard", sharp, schedule, encoder, 2000, 2, (False, False, False), None, cache_dir)
    refiner_state = _train_one("refiner", sharp, schedule, encoder, 1800, 3, (True, True, True), (0, 200), cache_dir)

    ae_cache = Path(cache_dir) / "ae.ckpt" if cache_dir else None
    if ae_cache is not None and ae_cache.exists():
        from microdiff.checkpoint import arrays_to_state_dict, load_checkpoint

        arrays, meta = load_checkpoint(ae_cache)
        ae = ConvAutoencoder(AutoencoderConfig.from_dict(meta["ae_config"]))
        ae.load_state_dict(arrays_to_state_dict("ae", arrays))
        ae.eval()
        _say("loaded cached ae")
    else:
        prng = np.random.default_rng(5)
        ae_train = blobworld.prepared_tensor(manifest, prng, bucket=TARGET)
        t0 = time.monotonic()
        ae = train_autoencoder(
            build_autoencoder(EXPT_AE, seed=0), ae_train, steps=1200, batch_size=16,
            rng=torch.Generator().manual_seed(0), lr=2e-3, ema_decay=0.99,
        )
        _say(f"trained feature autoencoder in {time.monotonic() - t0:.0f}s")
        if ae_cache is not None:
            from microdiff.checkpoint import save_checkpoint, state_dict_to_arrays

            save_checkpoint(
                ae_cache, state_dict_to_arrays("ae", ae.state_dict()), {"ae_config": EXPT_AE.to_dict()}
            )

    models = {
        "cond": cond_state.ema_model(),
        "nocond": nocond_state.ema_model(),
        "discard": discard_state.ema_model(),
        "refiner": refiner_state.ema_model(),
    }
    masks = {
        "cond": (True, True, True),
        "nocond": (False, False, False),
        "discard": (False, False, False),
        "refiner": (True, True, True),
    }
    losses = getattr(cond_state, "_losses", [])
    return Experiment(
        schedule=schedule, encoder=encoder, manifest=manifest, holdout=holdout,
        models=models, masks=masks, autoencoder=ae, cond_losses=losses,
    )


@pytest.fixture(scope="session")
def refined_samples(expt):
    """Refiner output for the no-conditioning baseline's samples."""
    base = expt.draw("nocond", MicroCond(size=LARGE, crop=(0, 0), target=TARGET), seed=12)
    g = torch.Generator().manual_seed(99)
    context = expt.encoder.encode_prompt("blob")
    t0 = time.monotonic()
    out = refine(
        base, expt.models["refiner"], expt.schedule, 200,
        context, MicroCond(size=LARGE, crop=(0, 0), target=TARGET), g,
        null_context=expt.encoder.null_context(),
    )
    _say(f"refined {base.shape[0]} samples in {time.monotonic() - t0:.0f}s")
    return base, out
