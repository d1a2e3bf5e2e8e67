"""Plain-SGD training with the poly learning-rate decay and standard augmentation.

Augmentation per sample: mean/std normalization, random rescale of both axes
by a ratio in [0.5, 2.0] (bilinear image / nearest labels), horizontal flip
with probability 0.5, then random crop to the training size or bottom-right
padding (image padded with the normalization-neutral 0, labels with 255).

All randomness is drawn from named substreams of (seed, iteration, sample),
so the resumable state is just the iteration counter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigError, GraphError, TrainDivergedError
from .rng import substream
from .tensor import Tensor, backward


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float
    total_iterations: int
    batch_size: int = 8
    poly_power: float = 0.9
    weight_decay: float = 0.0
    momentum: float = 0.0
    seed: int = 0
    crop_size: int = 512
    eval_every: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.weight_decay != 0.0:
            raise ConfigError("weight_decay is fixed at 0 for this optimizer setup")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")


@dataclass
class TrainState:
    """Resumable training state: rng streams are a pure function of (seed, iteration)."""

    iteration: int = 0
    running_loss: float = 0.0
    model: "M.SegmenterModel | None" = None
    log: list[str] = field(default_factory=list)
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


def poly_lr(base_lr: float, n_iter: int, n_total: int, power: float = 0.9) -> float:
    """base_lr * (1 - n_iter/n_total) ** power."""
    if not 0 <= n_iter <= n_total:
        raise ConfigError(f"poly_lr: n_iter {n_iter} outside [0, {n_total}]")
    if n_total == 0:
        return base_lr
    return base_lr * (1.0 - n_iter / n_total) ** power


def sgd_step(model: M.SegmenterModel, lr: float, momentum: float = 0.0,
             velocities: dict[str, np.ndarray] | None = None) -> None:
    """p <- p - lr * grad for every parameter, then zero the grads.

    Plain SGD by default; momentum is available behind a flag for experiments
    and keeps per-parameter velocity in `velocities`.
    """
    for name, p in model.named_parameters():
        if p.grad is None:
            raise GraphError(f"sgd_step: parameter {name} has no gradient")
        step = p.grad
        if momentum > 0.0:
            v = velocities.get(name)
            v = step.copy() if v is None else momentum * v + step
            velocities[name] = v
            step = v
        p.data -= (lr * step).astype(p.data.dtype)
        p.grad = None


def _scaled_size(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def apply_augment(image_u8: np.ndarray, labels: np.ndarray, crop_size: int, mean, std,
                  scale: float = 1.0, flip: bool = False, off_y: int = 0, off_x: int = 0
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic augmentation core; `augment` draws the parameters."""
    img = M.normalize_image(image_u8, mean, std)
    h, w = labels.shape
    nh, nw = _scaled_size(h, scale), _scaled_size(w, scale)
    if (nh, nw) != (h, w):
        img = T.resample_bilinear(img, nh, nw)
        labels = T.resample_nearest(labels, nh, nw)
    if flip:
        img = img[:, ::-1]
        labels = labels[:, ::-1]
    if (nh, nw) == (crop_size, crop_size) and not flip:
        return img, labels.copy()
    out_img = np.zeros((crop_size, crop_size, 3), dtype=np.float32)
    out_lab = np.full((crop_size, crop_size), M.IGNORE_INDEX, dtype=labels.dtype)
    take_h, take_w = min(crop_size, nh), min(crop_size, nw)
    out_img[:take_h, :take_w] = img[off_y : off_y + take_h, off_x : off_x + take_w]
    out_lab[:take_h, :take_w] = labels[off_y : off_y + take_h, off_x : off_x + take_w]
    return out_img, out_lab


def augment(sample, crop_size: int, mean, std, rng: np.random.Generator
            ) -> tuple[np.ndarray, np.ndarray]:
    """Randomized training view of a sample: normalized image + label map."""
    scale = rng.uniform(0.5, 2.0)
    flip = rng.random() < 0.5
    h, w = sample.labels.shape
    nh, nw = _scaled_size(h, scale), _scaled_size(w, scale)
    off_y = int(rng.integers(0, nh - crop_size + 1)) if nh > crop_size else 0
    off_x = int(rng.integers(0, nw - crop_size + 1)) if nw > crop_size else 0
    return apply_augment(sample.image, sample.labels, crop_size, mean, std, scale, flip, off_y, off_x)


def evaluate_miou(model: M.SegmenterModel, samples, window: int | None = None) -> float:
    """Single-scale sliding-window mIoU of `model` over `samples`."""
    from . import eval_infer as EI

    window = window or model.config.crop_size
    conf = EI.ConfusionMatrix(model.config.n_classes)
    for s in samples:
        img = M.normalize_image(s.image, model.config.mean, model.config.std)
        logits = EI.sliding_window_logits(model, img, window, window // 2)
        conf.update(np.argmax(logits, axis=-1), s.labels)
    return conf.miou()[0]


def train_loop(model: M.SegmenterModel, samples, cfg: TrainConfig, eval_samples=None,
               log_path: str | None = None, start_iteration: int = 0,
               stop_iteration: int | None = None, verbose: bool = False) -> TrainState:
    """Run the (possibly resumed) training schedule; fully reproducible from seed.

    `stop_iteration` pauses the run early without changing the lr schedule,
    which is always anchored to cfg.total_iterations.  Aborts with
    TrainDivergedError on a non-finite loss, leaving a diagnostic snapshot
    checkpoint next to `log_path` (or in the working directory).
    """
    if len(samples) == 0:
        raise ConfigError("train_loop: dataset is empty")
    state = TrainState(iteration=start_iteration, model=model)
    mean, std = model.config.mean, model.config.std
    model.zero_grads()
    last = cfg.total_iterations if stop_iteration is None else min(stop_iteration, cfg.total_iterations)
    log_file = open(log_path, "a") if log_path else None
    try:
        for it in range(start_iteration, last):
            lr = poly_lr(cfg.base_lr, it, cfg.total_iterations, cfg.poly_power)
            batch_rng = substream(cfg.seed, "batch", it)
            idxs = batch_rng.integers(0, len(samples), size=cfg.batch_size)
            batch_loss = 0.0
            for j, s_idx in enumerate(idxs):
                img, lab = augment(samples[int(s_idx)], cfg.crop_size, mean, std,
                                   substream(cfg.seed, "aug", it, j))
                logits = model.forward(Tensor(img), mode="train", rng=substream(cfg.seed, "sd", it, j))
                sample_loss = T.scale(M.loss(logits, lab), 1.0 / cfg.batch_size)
                backward(sample_loss)
                batch_loss += sample_loss.item()
            if not math.isfinite(batch_loss):
                snapshot = _diagnostic_snapshot(model, it, log_path)
                raise TrainDivergedError(
                    f"non-finite loss {batch_loss} at iteration {it + 1}; snapshot at {snapshot}",
                    snapshot_path=snapshot,
                )
            sgd_step(model, lr, cfg.momentum, state.velocities)
            state.iteration = it + 1
            state.running_loss = batch_loss
            line = f"iter={it + 1} lr={lr:.8g} loss={batch_loss:.6g}"
            if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                miou = evaluate_miou(model, eval_samples if eval_samples is not None else samples)
                line += f" miou={miou:.6g}"
            state.log.append(line)
            if log_file:
                log_file.write(line + "\n")
                log_file.flush()
            if verbose:
                print(line)
    finally:
        if log_file:
            log_file.close()
    return state


def _diagnostic_snapshot(model: M.SegmenterModel, iteration: int, log_path: str | None) -> str:
    import os

    from .data_io import save_checkpoint

    base = os.path.dirname(log_path) if log_path else "."
    path = os.path.join(base, f"diverged_iter{iteration + 1}.ckpt")
    save_checkpoint(model, path, trained_iterations=iteration)
    return path
