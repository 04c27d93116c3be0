"""DSM training: loss, CFG dropout, EMA tracking, and the staged loop.

The reference loop is single-threaded and seed-deterministic end to end.
Epoch batch plans are a pure function of (seed, stage, epoch), while noise,
crop, and dropout draws come from live generators whose states are saved in
checkpoints, so an interrupted run resumes bit-exactly.

When CFG dropout fires, only the text signal is replaced by the null context;
micro-conditionings are always preserved (inference always supplies them).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .conditioning import MicroCond
from .data import BucketSet, DatasetManifest, generate_buckets, make_batch_schedule, prepare_example
from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .schedule import NoiseSchedule, draw_unit_noise, schedule_from_config
from .textenc import DualTextEncoder, TextContext, tokenize


@dataclass(frozen=True)
class StageConfig:
    name: str
    steps: int
    batch_size: int
    resolution: int | None = None  # fixed square resolution ...
    bucket: dict | None = None  # ... or generate_buckets(**bucket) for multi-aspect
    offset_level: float = 0.0
    cfg_dropout_p: float = 0.1
    lr: float = 1e-4
    level_range: tuple[int, int] | None = None  # restrict training to a level band

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cfg_dropout_p <= 1.0:
            raise ValueError("cfg_dropout_p must lie in [0, 1]")
        if self.offset_level < 0:
            raise ValueError("offset_level must be >= 0")
        if (self.resolution is None) == (self.bucket is None):
            raise ValueError("exactly one of resolution / bucket must be set")


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[StageConfig, ...]
    seed: int = 0
    ema_decay: float = 0.9999
    use_size_cond: bool = True
    use_crop_cond: bool = True
    use_target_cond: bool = True

    def to_dict(self) -> dict:
        stages = []
        for s in self.stages:
            d = {
                "name": s.name,
                "steps": s.steps,
                "batch_size": s.batch_size,
                "offset_level": s.offset_level,
                "cfg_dropout_p": s.cfg_dropout_p,
                "lr": s.lr,
            }
            if s.resolution is not None:
                d["resolution"] = s.resolution
            if s.bucket is not None:
                d["bucket"] = s.bucket
            if s.level_range is not None:
                d["level_range"] = list(s.level_range)
            stages.append(d)
        return {
            "seed": self.seed,
            "ema_decay": self.ema_decay,
            "use_size_cond": self.use_size_cond,
            "use_crop_cond": self.use_crop_cond,
            "use_target_cond": self.use_target_cond,
            "stages": stages,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        stages = []
        for s in d["stages"]:
            s = dict(s)
            if "level_range" in s:
                s["level_range"] = tuple(s["level_range"])
            stages.append(StageConfig(**s))
        return cls(
            stages=tuple(stages),
            seed=d.get("seed", 0),
            ema_decay=d.get("ema_decay", 0.9999),
            use_size_cond=d.get("use_size_cond", True),
            use_crop_cond=d.get("use_crop_cond", True),
            use_target_cond=d.get("use_target_cond", True),
        )


def default_train_config(seed: int = 0) -> TrainConfig:
    """Desk-scale three-stage recipe: fixed-res pretrain, higher-res continue,
    multi-aspect finetune with offset noise."""
    return TrainConfig(
        seed=seed,
        stages=(
            StageConfig(name="pretrain", steps=2000, batch_size=16, resolution=32),
            StageConfig(name="continue", steps=1000, batch_size=8, resolution=64),
            StageConfig(
                name="multi-aspect",
                steps=1000,
                batch_size=8,
                bucket={"target_area": 64 * 64, "step": 16, "min_side": 32, "max_side": 128},
                offset_level=0.05,
            ),
        ),
    )


def ema_update(ema_params: dict, params: dict, decay: float) -> dict:
    """In-place ``ema = decay * ema + (1 - decay) * params`` over matching keys."""
    if set(ema_params) != set(params):
        raise ValueError("parameter name sets differ")
    for key, p in params.items():
        e = ema_params[key]
        if e.shape != p.shape:
            raise ValueError(f"shape mismatch for {key}")
        e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema_params


class EmaTracker:
    """Detached exponential-moving-average copy of a module's parameters."""

    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in module.state_dict().items()}

    def update(self, module: torch.nn.Module) -> None:
        ema_update(self.shadow, dict(module.state_dict()), self.decay)

    def copy_to(self, module: torch.nn.Module) -> None:
        module.load_state_dict(self.shadow)

    def module_copy(self, template: torch.nn.Module) -> torch.nn.Module:
        import copy

        out = copy.deepcopy(template)
        self.copy_to(out)
        out.eval()
        for p in out.parameters():
            p.requires_grad_(False)
        return out


def cfg_dropout(
    context: TextContext, null_context: TextContext, p: float, rng: torch.Generator
) -> TextContext:
    """With probability p return the null context, else the input unchanged."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p > 0 and float(torch.rand((), generator=rng)) < p:
        return null_context
    return context


def cfg_dropout_batch(seq, pooled, null_seq, null_pooled, p, rng):
    """Row-wise text dropout for a batch; returns new (seq, pooled)."""
    if p <= 0:
        return seq, pooled
    mask = torch.rand(seq.shape[0], generator=rng) < p
    seq = torch.where(mask[:, None, None], null_seq[None], seq)
    pooled = torch.where(mask[:, None], null_pooled[None], pooled)
    return seq, pooled


def _dsm_loss_with_levels(model, batch, schedule, offset_level, rng, level_range=None):
    x0, context, cond_values = batch
    seq, pooled = context
    lo, hi = level_range if level_range is not None else (0, schedule.num_levels)
    if not (0 <= lo < hi <= schedule.num_levels):
        raise ValueError("invalid level range")
    b = x0.shape[0]
    levels = torch.randint(lo, hi, (b,), generator=rng)
    sigma = schedule.sigmas[levels].to(x0.dtype)
    eps = draw_unit_noise(x0.shape, offset_level, rng, dtype=x0.dtype)
    x_t = x0 + sigma.view(b, 1, 1, 1) * eps
    pred = model(x_t, sigma, seq, pooled, cond_values)
    weights = schedule.weights[levels].to(x0.dtype)
    per_sample = ((pred - x0) ** 2).flatten(1).sum(dim=1)
    loss = (weights * per_sample).mean()
    if not bool(torch.isfinite(loss)):
        raise FloatingPointError("non-finite training loss")
    return loss, levels


def dsm_loss(model, batch, schedule, offset_level, rng, level_range=None) -> torch.Tensor:
    """Denoising loss: batch mean of ``sigma^-2 * ||model(x0 + sigma*eps) - x0||^2``.

    ``batch`` is (x0, (context_seq, pooled), cond_values); noise levels are
    drawn uniformly per sample, optionally restricted to ``level_range``.
    """
    return _dsm_loss_with_levels(model, batch, schedule, offset_level, rng, level_range)[0]


def stage_buckets(stage: StageConfig) -> BucketSet:
    if stage.resolution is not None:
        r = stage.resolution
        return BucketSet(buckets=((r, r),), target_area=r * r, step=r)
    return generate_buckets(**stage.bucket)


class TrainState:
    """Everything mutable about a run: weights, EMA, optimizer, rng streams."""

    def __init__(self, model, encoder, train_cfg, schedule, ema=None, optimizer=None):
        self.model = model
        self.encoder = encoder
        self.encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.train_cfg = train_cfg
        self.schedule = schedule
        self.ema = ema if ema is not None else EmaTracker(model, train_cfg.ema_decay)
        self.optimizer = optimizer if optimizer is not None else torch.optim.Adam(model.parameters())
        self.torch_gen = torch.Generator().manual_seed(train_cfg.seed)
        self.np_rng = np.random.default_rng(train_cfg.seed)
        self.stage_index = 0
        self.step_in_stage = 0
        self.global_step = 0

    def ema_model(self) -> Denoiser:
        return self.ema.module_copy(self.model)


def new_train_state(
    train_cfg: TrainConfig,
    model_cfg: DenoiserConfig,
    schedule: NoiseSchedule,
    encoder: DualTextEncoder | None = None,
) -> TrainState:
    model = build_denoiser(model_cfg, seed=train_cfg.seed)
    if encoder is None:
        with torch.random.fork_rng():
            torch.manual_seed(train_cfg.seed + 1)
            encoder = DualTextEncoder(d_a=model_cfg.context_dim - model_cfg.pooled_dim, d_b=model_cfg.pooled_dim)
    return TrainState(model, encoder, train_cfg, schedule)


def _masked_cond_values(conds: list[MicroCond], cfg: TrainConfig) -> torch.Tensor:
    values = torch.tensor([c.as_values() for c in conds], dtype=torch.float64)
    if not cfg.use_size_cond:
        values[:, 0:2] = 0
    if not cfg.use_crop_cond:
        values[:, 2:4] = 0
    if not cfg.use_target_cond:
        values[:, 4:6] = 0
    return values


def prepare_training_batch(state: TrainState, manifest: DatasetManifest, bucket, members):
    """Decode, resize, crop, embed captions; returns the dsm_loss batch tuple."""
    entries = manifest.entries
    xs, conds = [], []
    for i in members:
        out = prepare_example(entries[i], bucket, state.np_rng, manifest.root)
        while out is None:  # undecodable member: resample within the manifest
            j = int(state.np_rng.integers(0, len(entries)))
            out = prepare_example(entries[j], bucket, state.np_rng, manifest.root)
        pixels, cond = out
        xs.append(pixels)
        conds.append(cond)
    x0 = torch.from_numpy(np.stack(xs))
    cond_values = _masked_cond_values(conds, state.train_cfg)
    ids = torch.tensor(
        [tokenize(entries[i].caption, state.encoder.max_len) for i in members], dtype=torch.long
    )
    with torch.no_grad():
        seq, pooled = state.encoder.encode_batch(ids)
        null = state.encoder.null_context()
    return x0, seq, pooled, null, cond_values


def _epoch_plan(train_cfg, stage_index, epoch, manifest, buckets, batch_size):
    rng = np.random.default_rng((train_cfg.seed, stage_index, epoch))
    return make_batch_schedule(manifest, buckets, batch_size, rng)


def _level_histogram(levels: torch.Tensor, num_levels: int, bins: int = 8) -> str:
    counts, _ = np.histogram(levels.numpy(), bins=bins, range=(0, num_levels))
    return "|".join(str(int(c)) for c in counts)


def run_stage(
    state: TrainState,
    stage: StageConfig,
    manifest: DatasetManifest,
    log_fh=None,
    autoencoder=None,
) -> TrainState:
    """Advance one stage from the state's current step to ``stage.steps``.

    With ``autoencoder`` set, prepared pixels are encoded into its (frozen)
    latent space and the denoiser trains on latents instead of pixels.
    """
    buckets = stage_buckets(stage)
    for group in state.optimizer.param_groups:
        group["lr"] = stage.lr
    plan = None
    plan_epoch = -1
    batches_per_epoch = None
    while state.step_in_stage < stage.steps:
        step = state.step_in_stage
        if batches_per_epoch is None:
            plan = _epoch_plan(state.train_cfg, state.stage_index, 0, manifest, buckets, stage.batch_size)
            batches_per_epoch = len(plan)
            plan_epoch = 0
        epoch, idx = divmod(step, batches_per_epoch)
        if epoch != plan_epoch:
            plan = _epoch_plan(state.train_cfg, state.stage_index, epoch, manifest, buckets, stage.batch_size)
            plan_epoch = epoch
        bucket_idx, members = plan[idx]
        bucket = buckets.buckets[bucket_idx]

        x0, seq, pooled, null, cond_values = prepare_training_batch(state, manifest, bucket, members)
        if autoencoder is not None:
            with torch.no_grad():
                x0 = autoencoder.encode(x0)
        seq, pooled = cfg_dropout_batch(
            seq, pooled, null.sequence, null.pooled, stage.cfg_dropout_p, state.torch_gen
        )
        loss, levels = _dsm_loss_with_levels(
            state.model,
            (x0, (seq, pooled), cond_values),
            state.schedule,
            stage.offset_level,
            state.torch_gen,
            stage.level_range,
        )
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.ema.update(state.model)
        state.step_in_stage += 1
        state.global_step += 1
        if log_fh is not None:
            log_fh.write(
                f"step={state.global_step} stage={stage.name} bucket={bucket[0]}x{bucket[1]} "
                f"loss={float(loss.detach()):.6f} "
                f"level_hist={_level_histogram(levels, state.schedule.num_levels)}\n"
            )
    return state


def save_train_state(path: Path, state: TrainState, model_cfg: DenoiserConfig, extra_meta: dict | None = None):
    arrays = {}
    arrays.update(ckpt.state_dict_to_arrays("model", state.model.state_dict()))
    arrays.update(ckpt.state_dict_to_arrays("ema", state.ema.shadow))
    arrays.update(ckpt.state_dict_to_arrays("textenc", state.encoder.state_dict()))
    opt_state = state.optimizer.state_dict()
    for pid, entry in opt_state["state"].items():
        for key, value in entry.items():
            arrays[f"opt/{pid}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    arrays["rng/torch"] = ckpt.generator_state_array(state.torch_gen)
    meta = {
        "kind": "train-state",
        "model_config": model_cfg.to_dict(),
        "schedule": state.schedule.config(),
        "train_config": state.train_cfg.to_dict(),
        "encoder": {
            "d_a": state.encoder.d_a,
            "d_b": state.encoder.d_b,
            "max_len": state.encoder.max_len,
            "heads": state.encoder.heads,
        },
        "opt_param_groups": opt_state["param_groups"],
        "rng_numpy": state.np_rng.bit_generator.state,
        "stage_index": state.stage_index,
        "step_in_stage": state.step_in_stage,
        "global_step": state.global_step,
    }
    if extra_meta:
        meta.update(extra_meta)
    ckpt.save_checkpoint(path, arrays, meta)


def load_train_state(path: Path) -> tuple[TrainState, DenoiserConfig]:
    arrays, meta = ckpt.load_checkpoint(path)
    model_cfg = DenoiserConfig.from_dict(meta["model_config"])
    schedule = schedule_from_config(meta["schedule"])
    train_cfg = TrainConfig.from_dict(meta["train_config"])
    model = Denoiser(model_cfg)
    model.load_state_dict(arrays_to_float_state("model", arrays))
    encoder = DualTextEncoder(**meta["encoder"])
    encoder.load_state_dict(arrays_to_float_state("textenc", arrays))
    state = TrainState(model, encoder, train_cfg, schedule)
    state.ema.shadow = arrays_to_float_state("ema", arrays)

    opt_entries: dict[int, dict] = {}
    for key, arr in arrays.items():
        if key.startswith("opt/"):
            _, pid, name = key.split("/", 2)
            value = torch.as_tensor(arr.copy())
            if name == "step":
                value = value.reshape(())
            opt_entries.setdefault(int(pid), {})[name] = value
    groups = [dict(g, betas=tuple(g["betas"])) if "betas" in g else dict(g) for g in meta["opt_param_groups"]]
    state.optimizer.load_state_dict({"state": opt_entries, "param_groups": groups})
    ckpt.set_generator_state(state.torch_gen, arrays["rng/torch"])
    state.np_rng.bit_generator.state = meta["rng_numpy"]
    state.stage_index = meta["stage_index"]
    state.step_in_stage = meta["step_in_stage"]
    state.global_step = meta["global_step"]
    return state, model_cfg


def arrays_to_float_state(prefix: str, arrays: dict) -> dict:
    return ckpt.arrays_to_state_dict(prefix, arrays)


def run_training(
    train_cfg: TrainConfig,
    model_cfg: DenoiserConfig,
    schedule: NoiseSchedule,
    manifest: DatasetManifest,
    out_dir: Path,
    state: TrainState | None = None,
    encoder: DualTextEncoder | None = None,
) -> Path:
    """Run all remaining stages, checkpointing after each; returns the final path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = new_train_state(train_cfg, model_cfg, schedule, encoder)
    log_path = out_dir / "train.log"
    with log_path.open("a", encoding="utf-8") as log_fh:
        while state.stage_index < len(train_cfg.stages):
            stage = train_cfg.stages[state.stage_index]
            t0 = time.monotonic()
            run_stage(state, stage, manifest, log_fh=log_fh)
            log_fh.write(
                f"# stage={stage.name} done steps={stage.steps} wall={time.monotonic() - t0:.1f}s\n"
            )
            state.stage_index += 1
            state.step_in_stage = 0
            save_train_state(out_dir / f"stage_{state.stage_index - 1}.ckpt", state, model_cfg)
    final = out_dir / "final.ckpt"
    save_train_state(final, state, model_cfg)
    return final
