"""Command-line surface: bucketize, train, sample, refine, eval, stats, replay.

Every command writes a sidecar file of its fully resolved configuration
(line-delimited ``key=value`` with a format-version header) next to its
outputs; ``microdiff replay <sidecar>`` re-executes a run from that file
alone. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import metrics as metrics_mod
from . import sampling as sampling_mod
from . import train as train_mod
from .checkpoint import load_checkpoint
from .conditioning import MicroCond
from .denoiser import DenoiserConfig
from .schedule import schedule_from_config

SIDECAR_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"usage error: {message}")


def write_sidecar(path: Path, command: str, args: dict) -> None:
    lines = [f"format_version={SIDECAR_VERSION}", f"command={command}"]
    for key in sorted(args):
        if key in ("func", "command", "sidecar"):
            continue
        lines.append(f"{key}={json.dumps(args[key])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path: Path) -> tuple[str, dict]:
    command, args = None, {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key == "format_version":
            if int(value) != SIDECAR_VERSION:
                raise ValueError(f"unsupported sidecar version {value}")
        elif key == "command":
            command = value
        else:
            args[key] = json.loads(value)
    if command is None:
        raise ValueError("sidecar missing command")
    return command, args


def _parse_pair(text: str, sep: str = "x") -> tuple[int, int]:
    a, _, b = text.partition(sep)
    return int(a), int(b)


def save_image(pixels: np.ndarray, path: Path) -> None:
    """Save (C, H, W) float pixels in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(pixels, dtype=np.float32), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(arr[:3].transpose(1, 2, 0), mode="RGB")
    img.save(path)


def load_image(path: Path) -> np.ndarray:
    """Load a PNG (or raw .npy dump) back to (C, H, W) float32 in [0, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.asarray(np.load(path), dtype=np.float32)
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def _load_sampler_parts(ckpt_path: str, use_raw_weights: bool = False):
    state, model_cfg = train_mod.load_train_state(ckpt_path)
    model = state.model if use_raw_weights else state.ema_model()
    model.eval()
    cfg = state.train_cfg
    cond_mask = (cfg.use_size_cond, cfg.use_crop_cond, cfg.use_target_cond)
    return model, state.encoder, state.schedule, cond_mask


def cmd_bucketize(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    buckets = data_mod.generate_buckets(args.target_area, args.step, args.min_side, args.max_side)
    (out_dir / "buckets.txt").write_text(data_mod.format_bucket_table(buckets), encoding="utf-8")
    lines = ["id\theight\twidth\tbucket_index\tbucket_h\tbucket_w"]
    if args.manifest:
        manifest = data_mod.load_manifest(args.manifest)
        for e in manifest.entries:
            idx = data_mod.assign_bucket(e.h_original, e.w_original, buckets)
            bh, bw = buckets.buckets[idx]
            lines.append(f"{e.id}\t{e.h_original}\t{e.w_original}\t{idx}\t{bh}\t{bw}")
    (out_dir / "assignments.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_sidecar(out_dir / "run.cfg", "bucketize", vars(args))
    print(f"wrote {len(buckets)} buckets to {out_dir}")
    return 0


def cmd_train(args) -> int:
    run_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_cfg = DenoiserConfig.from_dict(run_cfg["model"])
    schedule = schedule_from_config(run_cfg["schedule"])
    train_cfg = train_mod.TrainConfig.from_dict(run_cfg["train"])
    manifest = data_mod.load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state, model_cfg = train_mod.load_train_state(args.resume)
    final = train_mod.run_training(train_cfg, model_cfg, schedule, manifest, out_dir, state=state)
    write_sidecar(out_dir / "run.cfg", "train", vars(args))
    print(f"final checkpoint: {final}")
    return 0


def _sweep_values(args, n: int) -> list[MicroCond]:
    base = MicroCond(
        size=_parse_pair(args.orig_size),
        crop=_parse_pair(args.crop, sep=","),
        target=_parse_pair(args.target),
    )
    if not args.sweep:
        return [base] * n
    conds = []
    for i in range(n):
        frac = i / max(n - 1, 1)
        if args.sweep == "size":
            lo = _parse_pair(args.sweep_from) if args.sweep_from else (base.target[0] // 2, base.target[1] // 2)
            hi = _parse_pair(args.sweep_to) if args.sweep_to else (base.target[0] * 4, base.target[1] * 4)
            size = (round(lo[0] + frac * (hi[0] - lo[0])), round(lo[1] + frac * (hi[1] - lo[1])))
            conds.append(MicroCond(size=size, crop=base.crop, target=base.target))
        else:  # crop sweep
            lo = _parse_pair(args.sweep_from, sep=",") if args.sweep_from else (0, 0)
            hi = _parse_pair(args.sweep_to, sep=",") if args.sweep_to else (base.target[0] // 2, base.target[1] // 2)
            crop = (round(lo[0] + frac * (hi[0] - lo[0])), round(lo[1] + frac * (hi[1] - lo[1])))
            conds.append(MicroCond(size=base.size, crop=crop, target=base.target))
    return conds


def cmd_sample(args) -> int:
    model, encoder, schedule, cond_mask = _load_sampler_parts(args.ckpt, args.raw_weights)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    refiner = None
    if args.refiner_ckpt:
        refiner, _, _, _ = _load_sampler_parts(args.refiner_ckpt)

    if args.grid:
        rows, cols = _parse_pair(args.grid)
        conds = _sweep_values(args, rows * cols)
        tiles = []
        for i, cond in enumerate(conds):
            out_size = _parse_pair(args.size) if args.size else None
            request = sampling_mod.SampleRequest(
                prompt=args.prompt, microcond=cond, guidance_w=args.w,
                steps=args.steps, sampler=args.sampler, seed=args.seed, count=1,
                out_size=out_size,
            )
            tiles.append(_sample_one(model, schedule, request, encoder, refiner, args, cond_mask)[0])
        c, h, w = tiles[0].shape
        grid = np.zeros((c, rows * h, cols * w), dtype=np.float32)
        for i, tile in enumerate(tiles):
            r, cc = divmod(i, cols)
            grid[:, r * h : (r + 1) * h, cc * w : (cc + 1) * w] = tile
        save_image(grid, out_path)
        if args.dump_raw:
            np.save(out_path.with_suffix(".npy"), grid)
    else:
        cond = _sweep_values(args, 1)[0]
        out_size = _parse_pair(args.size) if args.size else None
        request = sampling_mod.SampleRequest(
            prompt=args.prompt, microcond=cond, guidance_w=args.w,
            steps=args.steps, sampler=args.sampler, seed=args.seed,
            count=args.count, refine_levels=args.refine_levels, out_size=out_size,
        )
        samples = _sample_one(model, schedule, request, encoder, refiner, args, cond_mask)
        if args.count == 1:
            save_image(samples[0], out_path)
            if args.dump_raw:
                np.save(out_path.with_suffix(".npy"), samples[0])
        else:
            for i, s in enumerate(samples):
                save_image(s, out_path.with_stem(f"{out_path.stem}_{i:04d}"))
            if args.dump_raw:
                np.save(out_path.with_suffix(".npy"), samples)
    write_sidecar(out_path.with_suffix(".cfg"), "sample", vars(args))
    print(f"wrote {out_path}")
    return 0


def _sample_one(model, schedule, request, encoder, refiner, args, cond_mask) -> np.ndarray:
    sde = sampling_mod.SdeConfig(beta=args.sde_beta, steps=request.steps)
    x = sampling_mod.sample(model, schedule, request, encoder, sde=sde, cond_mask=cond_mask)
    if refiner is not None and args.refine_levels > 0:
        rng = torch.Generator().manual_seed(request.seed + 1)
        context = encoder.encode_prompt(request.prompt)
        x = sampling_mod.refine(
            x, refiner, schedule, args.refine_levels, context, request.microcond, rng,
            null_context=encoder.null_context(),
        )
    return x.numpy()


def cmd_refine(args) -> int:
    refiner, encoder, schedule, _ = _load_sampler_parts(args.ckpt)
    base = torch.from_numpy(load_image(args.input))[None]
    rng = torch.Generator().manual_seed(args.seed)
    context = encoder.encode_prompt(args.prompt)
    h, w = base.shape[-2], base.shape[-1]
    cond = MicroCond.inference_default(size=(h, w), target=(h, w))
    out = sampling_mod.refine(
        base, refiner, schedule, args.levels, context, cond, rng,
        null_context=encoder.null_context(),
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out[0].numpy(), out_path)
    write_sidecar(out_path.with_suffix(".cfg"), "refine", vars(args))
    print(f"wrote {out_path}")
    return 0


def _load_dir_images(directory: Path) -> np.ndarray:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix in (".png", ".npy"))
    if not paths:
        raise ValueError(f"no images in {directory}")
    return np.stack([load_image(p) for p in paths])


def _build_extractor(spec: str):
    if spec == "pixels" or spec.startswith("pixels:"):
        stride = int(spec.split(":")[1]) if ":" in spec else 1
        return metrics_mod.PixelFeatures(stride=stride)
    if spec.startswith("randproj:"):
        return ("randproj", int(spec.split(":")[1]))
    if spec.startswith("ae:"):
        from .autoencoder import AutoencoderConfig, ConvAutoencoder

        arrays, meta = load_checkpoint(spec[3:])
        ae = ConvAutoencoder(AutoencoderConfig.from_dict(meta["ae_config"]))
        ae.load_state_dict({k.split("/", 1)[1]: torch.as_tensor(v.copy()) for k, v in arrays.items()})
        ae.eval()
        return metrics_mod.AutoencoderFeatures(ae)
    raise ValueError(f"unknown extractor {spec!r}")


def cmd_eval(args) -> int:
    samples = _load_dir_images(args.samples)
    reference = _load_dir_images(args.reference)
    extractor = _build_extractor(args.extractor)
    if isinstance(extractor, tuple):  # random projection needs the input dim
        dim = int(np.prod(samples.shape[1:]))
        extractor = metrics_mod.RandomProjectionFeatures(dim, extractor[1], seed=args.seed)
    stats_a = metrics_mod.feature_stats(extractor(samples))
    stats_b = metrics_mod.feature_stats(extractor(reference))
    value = metrics_mod.frechet_distance(stats_a, stats_b)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    record = [
        f"format_version={SIDECAR_VERSION}",
        f"frechet_distance={value:.10g}",
        f"sample_count={stats_a.count}",
        f"reference_count={stats_b.count}",
        f"extractor={extractor.name}",
    ]
    out_path.write_text("\n".join(record) + "\n", encoding="utf-8")
    write_sidecar(out_path.with_suffix(".cfg"), "eval", vars(args))
    print(f"frechet_distance={value:.10g}")
    return 0


def cmd_stats(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    result = data_mod.size_histogram(manifest, args.threshold)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format_version={SIDECAR_VERSION}",
        f"fraction_below={result['fraction_below']:.6f}",
        f"threshold={args.threshold}",
        "h_edges=" + ",".join(f"{v:g}" for v in result["h_edges"]),
        "w_edges=" + ",".join(f"{v:g}" for v in result["w_edges"]),
    ]
    for row in result["histogram"]:
        lines.append("hist=" + ",".join(f"{v:g}" for v in row))
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_sidecar(out_path.with_suffix(".cfg"), "stats", vars(args))
    print(f"fraction_below={result['fraction_below']:.6f}")
    return 0


def cmd_replay(args) -> int:
    command, stored = read_sidecar(args.sidecar)
    ns = argparse.Namespace(**stored)
    ns.func = _COMMANDS[command]
    return ns.func(ns)


_COMMANDS = {}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="microdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bucketize", help="generate buckets and assign manifest entries")
    p.add_argument("--manifest", default="")
    p.add_argument("--target-area", type=int, default=1024 * 1024)
    p.add_argument("--step", type=int, default=64)
    p.add_argument("--min-side", type=int, default=512)
    p.add_argument("--max-side", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bucketize)

    p = sub.add_parser("train", help="run the staged training loop")
    p.add_argument("--config", required=True, help="JSON run config: model/schedule/train")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default="")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--size", default="", help="output HxW (defaults to --target)")
    p.add_argument("--orig-size", default="64x64", help="size conditioning HxW")
    p.add_argument("--crop", default="0,0", help="crop conditioning T,L (inference default 0,0)")
    p.add_argument("--target", default="32x32", help="target-size conditioning HxW")
    p.add_argument("--w", type=float, default=5.0, help="guidance strength")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--sampler", choices=("ddim", "ode", "sde"), default="ddim")
    p.add_argument("--sde-beta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--refiner-ckpt", default="")
    p.add_argument("--refine-levels", type=int, default=0)
    p.add_argument("--grid", default="", help="RxC conditioning-sweep grid")
    p.add_argument("--sweep", choices=("size", "crop"), default="")
    p.add_argument("--sweep-from", default="")
    p.add_argument("--sweep-to", default="")
    p.add_argument("--raw-weights", action="store_true", help="sample with raw instead of EMA weights")
    p.add_argument("--dump-raw", action="store_true", help="also dump float samples as .npy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("refine", help="re-noise and denoise an image with a refiner")
    p.add_argument("--ckpt", required=True, help="refiner checkpoint")
    p.add_argument("--input", required=True, help="PNG or .npy input image")
    p.add_argument("--levels", type=int, default=200)
    p.add_argument("--prompt", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="Frechet distance between two sample directories")
    p.add_argument("--samples", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--extractor", default="pixels", help="pixels[:stride] | randproj:DIM | ae:CKPT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="size-distribution statistics of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("replay", help="re-run a command from its sidecar")
    p.add_argument("sidecar")
    p.set_defaults(func=cmd_replay)

    _COMMANDS.update(
        bucketize=cmd_bucketize, train=cmd_train, sample=cmd_sample,
        refine=cmd_refine, eval=cmd_eval, stats=cmd_stats,
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (FloatingPointError,) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, IndexError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
