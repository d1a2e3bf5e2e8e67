"""Operator command line: gen-data | train | eval | infer | analyze | bench |
checkpoint-inspect.

Exit codes: 0 success, 1 validation error (bad flags, configs, file contents),
2 runtime failure.  Every command prints its resolved configuration first.
"""
from __future__ import annotations

import argparse
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import data_io as IO
from . import eval_infer as EI
from . import model as M
from . import train as TR
from .errors import CheckpointError, ConfigError, ParseError, ShapeError, TrainDivergedError
from .tensor import Tensor, no_grad


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on flag/usage errors (validation failures)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _print_config(title: str, lines: dict) -> None:
    print(f"resolved config ({title}):")
    for key, value in lines.items():
        print(f"  {key} = {value}")


def _load_model(ckpt_path: str):
    model, trained = IO.load_checkpoint(ckpt_path)
    return model, trained


def cmd_gen_data(args) -> int:
    spec = IO.parse_synthetic_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    _print_config("gen-data", {
        "spec": args.spec, "out": args.out, "n_images": spec.n_images,
        "size": f"{spec.height}x{spec.width}", "n_classes": spec.n_classes,
        "shapes": ",".join(spec.shapes), "noise_std": spec.noise_std, "seed": spec.seed,
    })
    manifest_path = IO.generate_synthetic(spec, args.out)
    print(f"wrote {spec.n_images} image/label pairs; manifest at {manifest_path}")
    return 0


def cmd_train(args) -> int:
    manifest = IO.load_manifest(args.data)
    model_cfg, train_cfg = IO.parse_config(args.config, mean=manifest.mean, std=manifest.std)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if model_cfg.n_classes != manifest.n_classes:
        raise ConfigError(
            f"config n_classes {model_cfg.n_classes} != manifest n_classes {manifest.n_classes}"
        )
    start = 0
    if args.resume:
        model, start = _load_model(args.resume)
        if model.config != model_cfg:
            raise ConfigError("resume checkpoint config does not match the given config file")
        print(f"resuming from {args.resume} at iteration {start}")
    else:
        model = M.SegmenterModel(model_cfg, seed=train_cfg.seed)
    _print_config("train", {
        "data": args.data, "out": args.out, "seed": train_cfg.seed,
        "base_lr": train_cfg.base_lr, "iterations": train_cfg.total_iterations,
        "batch_size": train_cfg.batch_size, "eval_every": train_cfg.eval_every,
    })
    for line in IO.model_config_text(model_cfg).strip().splitlines():
        print(f"  {line}")
    samples = IO.load_samples(manifest)
    state = TR.train_loop(model, samples, train_cfg, log_path=args.log,
                          start_iteration=start, verbose=True)
    IO.save_checkpoint(model, args.out, trained_iterations=state.iteration)
    print(f"saved checkpoint to {args.out} (iteration {state.iteration})")
    return 0


def cmd_eval(args) -> int:
    model, trained = _load_model(args.ckpt)
    manifest = IO.load_manifest(args.data)
    if model.config.n_classes != manifest.n_classes:
        raise ConfigError(
            f"checkpoint n_classes {model.config.n_classes} != manifest n_classes {manifest.n_classes}"
        )
    _print_config("eval", {
        "ckpt": args.ckpt, "data": args.data, "trained_iterations": trained,
        "multiscale": args.multiscale, "size_bands": args.size_bands,
        "crop_size": model.config.crop_size, "decoder": model.config.decoder_kind,
    })
    samples = IO.load_samples(manifest)
    conf, preds = EI.evaluate_dataset(model, samples, multiscale=args.multiscale)
    score, per_class = conf.miou()
    lines = [f"miou = {score:.6f}"]
    for k, iou in enumerate(per_class):
        name = manifest.class_names[k] if k < len(manifest.class_names) else f"class_{k}"
        lines.append(f"iou[{k}] {name} = {iou:.6f}" if not np.isnan(iou) else f"iou[{k}] {name} = absent")
    if args.size_bands:
        bands = EI.dataset_size_stratified_iou(preds, [s.labels for s in samples], manifest.n_classes)
        for name, value in bands.items():
            rendered = "undefined (no components)" if np.isnan(value) else f"{value:.6f}"
            lines.append(f"miou[{name}] = {rendered}")
    text = "\n".join(lines)
    print(text)
    if args.log:
        with open(args.log, "a") as f:
            f.write(text + "\n")
    return 0


def cmd_infer(args) -> int:
    model, _ = _load_model(args.ckpt)
    image = IO.read_image_ppm(args.image)
    _print_config("infer", {"ckpt": args.ckpt, "image": args.image, "out": args.out,
                            "input_size": f"{image.shape[0]}x{image.shape[1]}"})
    normalized = M.normalize_image(image, model.config.mean, model.config.std)
    logits = EI.sliding_window_logits(model, normalized)
    labels = np.argmax(logits, axis=-1).astype(np.uint8)
    IO.write_labels_pgm(args.out, labels)
    print(f"wrote {args.out}")
    return 0


def cmd_analyze(args) -> int:
    model, _ = _load_model(args.ckpt)
    _print_config("analyze", {"ckpt": args.ckpt, "kind": args.kind, "data": args.data,
                              "limit": args.limit})
    if args.kind == "attention":
        if not args.data:
            raise ConfigError("analyze attention requires --data")
        manifest = IO.load_manifest(args.data)
        samples = IO.load_samples(manifest)[: args.limit]
        crop = model.config.crop_size
        images = []
        for s in samples:
            img = M.normalize_image(s.image, model.config.mean, model.config.std)
            if img.shape[:2] != (crop, crop):
                img, _ = TR.apply_augment(s.image, s.labels, crop, model.config.mean, model.config.std)
            images.append(img)
        table = EI.attention_distance(model, images)
        lines = ["layer\thead\tmean_distance_px"]
        for li in range(table.shape[0]):
            for hi in range(table.shape[1]):
                lines.append(f"{li}\t{hi}\t{table[li, hi]:.4f}")
    else:  # classemb
        coords = EI.class_embedding_projection(model)
        lines = ["class\tx\ty"]
        for k, (x, y) in enumerate(coords):
            lines.append(f"{k}\t{x:.6f}\t{y:.6f}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


def _bench_forward(model, image):
    with no_grad():
        model.forward(Tensor(image), mode="eval")


def cmd_bench(args) -> int:
    if args.repeat < 1:
        raise ConfigError("--repeat must be >= 1")
    model, _ = _load_model(args.ckpt)
    if args.resolution and args.resolution != model.config.crop_size:
        model, _ = IO.load_checkpoint_resized(args.ckpt, args.resolution)
    resolution = model.config.crop_size
    _print_config("bench", {"ckpt": args.ckpt, "resolution": resolution,
                            "repeat": args.repeat, "seed": args.seed})
    rng = np.random.default_rng(args.seed or 0)
    image = rng.standard_normal((resolution, resolution, 3)).astype(np.float32)
    _bench_forward(model, image)  # warm-up
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        _bench_forward(model, image)
        times.append(time.perf_counter() - t0)
    reference = 1.0 / statistics.median(times)
    print(f"images_per_sec_reference = {reference:.4f}")
    workers = os.cpu_count() or 1
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda _: _bench_forward(model, image), range(args.repeat)))
    wall = time.perf_counter() - t0
    print(f"images_per_sec_parallel = {args.repeat / wall:.4f} (workers={workers})")
    return 0


def cmd_checkpoint_inspect(args) -> int:
    config_text, trained, tensors = IO.read_checkpoint_raw(args.ckpt)
    _print_config("checkpoint-inspect", {"ckpt": args.ckpt, "trained_iterations": trained})
    print("embedded config:")
    for line in config_text.strip().splitlines():
        print(f"  {line}")
    print("tensors:")
    total = 0
    for name, arr in tensors.items():
        print(f"  {name} {tuple(arr.shape)}")
        total += arr.size
    print(f"total parameters: {total}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="patchseg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--multiscale", action="store_true")
    p.add_argument("--size-bands", action="store_true", dest="size_bands")
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one PPM image into a PGM label map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("analyze", help="attention-distance or class-embedding tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("kind", choices=("attention", "classemb"))
    p.add_argument("--data", default=None)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="forward-pass throughput")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("checkpoint-inspect", help="dump names, shapes and config")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_checkpoint_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, CheckpointError, ShapeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainDivergedError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # unexpected runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
