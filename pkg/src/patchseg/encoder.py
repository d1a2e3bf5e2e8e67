"""Patch encoder: patchification, learned embeddings, and the transformer stack.

Blocks are pre-norm: x + MSA(LN(x)) then x + MLP(LN(x)), with a terminal
layer norm after the last block.  In train mode each residual branch is
skipped whole with probability `stochastic_depth_rate` (survivors are not
rescaled, neither in train nor in eval) and dropout is applied to the MSA
output and to each MLP layer output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LAYER_NORM_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    image_size: tuple[int, int]
    patch_size: int
    depth: int
    token_size: int
    heads: int
    channels: int = 3
    dropout_rate: float = 0.0
    stochastic_depth_rate: float = 0.0

    def __post_init__(self):
        h, w = self.image_size
        p = self.patch_size
        if p <= 0:
            raise ConfigError(f"patch_size must be positive, got {p}")
        if h % p or w % p:
            raise ConfigError(f"image size {h}x{w} not divisible by patch size {p}")
        if self.token_size % self.heads:
            raise ConfigError(f"token_size {self.token_size} not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0 or not 0.0 <= self.stochastic_depth_rate <= 1.0:
            raise ConfigError("regularization rates out of range")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.token_size // self.heads

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.token_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def _linear_params(rng, n_in: int, n_out: int, dtype, init: str) -> tuple[Tensor, Tensor]:
    if init == "zeros":
        w = np.zeros((n_in, n_out), dtype=dtype)
    else:
        w = T.trunc_normal(rng, (n_in, n_out), std=0.02, dtype=dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)


def _ln_params(dim: int, dtype) -> tuple[Tensor, Tensor]:
    return (
        Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
    )


class LayerParams:
    """Weights of one pre-norm transformer block (MSA + 2-layer MLP)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32, init: str = "trunc_normal"):
        d, hidden = cfg.token_size, cfg.mlp_hidden
        self.ln1_gain, self.ln1_bias = _ln_params(d, dtype)
        self.wq, self.bq = _linear_params(rng, d, d, dtype, init)
        self.wk, self.bk = _linear_params(rng, d, d, dtype, init)
        self.wv, self.bv = _linear_params(rng, d, d, dtype, init)
        self.wo, self.bo = _linear_params(rng, d, d, dtype, init)
        self.ln2_gain, self.ln2_bias = _ln_params(d, dtype)
        self.w1, self.b1 = _linear_params(rng, d, hidden, dtype, init)
        self.w2, self.b2 = _linear_params(rng, hidden, d, dtype, init)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.ln1.gain", self.ln1_gain
        yield f"{prefix}.ln1.bias", self.ln1_bias
        yield f"{prefix}.attn.q.weight", self.wq
        yield f"{prefix}.attn.q.bias", self.bq
        yield f"{prefix}.attn.k.weight", self.wk
        yield f"{prefix}.attn.k.bias", self.bk
        yield f"{prefix}.attn.v.weight", self.wv
        yield f"{prefix}.attn.v.bias", self.bv
        yield f"{prefix}.attn.out.weight", self.wo
        yield f"{prefix}.attn.out.bias", self.bo
        yield f"{prefix}.ln2.gain", self.ln2_gain
        yield f"{prefix}.ln2.bias", self.ln2_bias
        yield f"{prefix}.mlp.fc1.weight", self.w1
        yield f"{prefix}.mlp.fc1.bias", self.b1
        yield f"{prefix}.mlp.fc2.weight", self.w2
        yield f"{prefix}.mlp.fc2.bias", self.b2


class EncoderParams:
    """All encoder weights: patch projection, position table, blocks, final LN."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32, init: str = "trunc_normal"):
        self.patch_weight, self.patch_bias = _linear_params(rng, cfg.patch_dim, cfg.token_size, dtype, init)
        if init == "zeros":
            pos = np.zeros((cfg.n_tokens, cfg.token_size), dtype=dtype)
        else:
            pos = T.trunc_normal(rng, (cfg.n_tokens, cfg.token_size), std=0.02, dtype=dtype)
        self.pos = Tensor(pos, requires_grad=True)
        self.layers = [LayerParams(cfg, rng, dtype, init) for _ in range(cfg.depth)]
        self.final_gain, self.final_bias = _ln_params(cfg.token_size, dtype)

    def named(self, prefix: str = "encoder") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.patch_embed.weight", self.patch_weight
        yield f"{prefix}.patch_embed.bias", self.patch_bias
        yield f"{prefix}.pos_embed", self.pos
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layers.{i}")
        yield f"{prefix}.final_ln.gain", self.final_gain
        yield f"{prefix}.final_ln.bias", self.final_bias


def parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form size of EncoderParams for this config."""
    d = cfg.token_size
    per_layer = 12 * d * d + 13 * d
    return (cfg.patch_dim * d + d) + cfg.n_tokens * d + cfg.depth * per_layer + 2 * d


@dataclass
class ForwardTrace:
    """Optional per-forward capture: attention maps and branch-drop decisions."""

    attention: list[list[np.ndarray]] = field(default_factory=list)  # [layer][head], each (N, N)
    branch_drops: list[bool] = field(default_factory=list)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """(H, W, C) -> (N, P*P*C); patches in row-major grid order, each patch
    flattened row-major as (y, x, channel)."""
    if image.data.ndim != 3:
        raise ShapeError(f"patchify: expects (H, W, C), got {image.shape}")
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify: {h}x{w} not divisible by patch size {p}; pad first")
    gh, gw = h // p, w // p
    x = T.reshape(image, (gh, p, gw, p, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (gh * gw, p * p * c))


def unpatchify(patches: Tensor, grid: tuple[int, int], patch_size: int, channels: int) -> Tensor:
    """Inverse of patchify."""
    gh, gw = grid
    p = patch_size
    x = T.reshape(patches, (gh, gw, p, p, channels))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (gh * p, gw * p, channels))


def embed(patches: Tensor, params: EncoderParams) -> Tensor:
    """Project flattened patches and add position embeddings: z0 = proj(x) + pos."""
    if patches.shape[1] != params.patch_weight.shape[0]:
        raise ShapeError(
            f"embed: patch width {patches.shape[1]} does not match projection {params.patch_weight.shape}"
        )
    if patches.shape[0] != params.pos.shape[0]:
        raise ShapeError(
            f"embed: {patches.shape[0]} patches vs {params.pos.shape[0]} position rows; "
            "interpolate_pos must be applied first"
        )
    z = T.add_bias(T.matmul(patches, params.patch_weight), params.patch_bias)
    return T.add(z, params.pos)


def interpolate_pos(pos: np.ndarray, old_grid: tuple[int, int], new_grid: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample the (N_old, D) position table to a new patch grid."""
    gh, gw = old_grid
    if pos.shape[0] != gh * gw:
        raise ShapeError(f"interpolate_pos: {pos.shape[0]} rows vs grid {old_grid}")
    if tuple(old_grid) == tuple(new_grid):
        return pos
    d = pos.shape[1]
    as_grid = pos.reshape(gh, gw, d)
    resized = T.resample_bilinear(as_grid, new_grid[0], new_grid[1])
    return np.ascontiguousarray(resized.reshape(new_grid[0] * new_grid[1], d))


def msa(z: Tensor, lp: LayerParams, heads: int, trace: ForwardTrace | None = None) -> Tensor:
    """Multi-head self-attention: per head softmax(Q K^T / sqrt(d)) V, heads
    concatenated, then the output projection."""
    n, d = z.shape
    if d % heads:
        raise ShapeError(f"msa: token size {d} not divisible by {heads} heads")
    hd = d // heads
    q = T.add_bias(T.matmul(z, lp.wq), lp.bq)
    k = T.add_bias(T.matmul(z, lp.wk), lp.bk)
    v = T.add_bias(T.matmul(z, lp.wv), lp.bv)
    captured: list[np.ndarray] = []
    outs = []
    for h in range(heads):
        qh = T.slice_axis(q, 1, h * hd, hd)
        kh = T.slice_axis(k, 1, h * hd, hd)
        vh = T.slice_axis(v, 1, h * hd, hd)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        if trace is not None:
            captured.append(attn.data.copy())
        outs.append(T.matmul(attn, vh))
    if trace is not None:
        trace.attention.append(captured)
    merged = outs[0] if heads == 1 else T.concat(outs, axis=1)
    return T.add_bias(T.matmul(merged, lp.wo), lp.bo)


def _check_mode(mode: str, rng) -> None:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ConfigError("train mode requires an rng")


def block_forward(
    z: Tensor,
    lp: LayerParams,
    cfg: EncoderConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """One pre-norm block; also used by the mask decoder's layers."""
    training = mode == "train"
    sd = cfg.stochastic_depth_rate if training else 0.0
    drop = cfg.dropout_rate if training else 0.0

    skip_attn = sd > 0.0 and rng.random() < sd
    if trace is not None:
        trace.branch_drops.append(skip_attn)
    if not skip_attn:
        a = msa(T.layer_norm(z, lp.ln1_gain, lp.ln1_bias, LAYER_NORM_EPS), lp, cfg.heads, trace)
        if drop > 0.0:
            a = T.dropout(a, drop, rng)
        z = T.add(z, a)
    elif trace is not None:
        trace.attention.append([])

    skip_mlp = sd > 0.0 and rng.random() < sd
    if trace is not None:
        trace.branch_drops.append(skip_mlp)
    if not skip_mlp:
        h = T.layer_norm(z, lp.ln2_gain, lp.ln2_bias, LAYER_NORM_EPS)
        h = T.gelu(T.add_bias(T.matmul(h, lp.w1), lp.b1))
        if drop > 0.0:
            h = T.dropout(h, drop, rng)
        h = T.add_bias(T.matmul(h, lp.w2), lp.b2)
        if drop > 0.0:
            h = T.dropout(h, drop, rng)
        z = T.add(z, h)
    return z


def encoder_forward(
    z0: Tensor,
    params: EncoderParams,
    cfg: EncoderConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """Run the L-block stack and the terminal layer norm."""
    _check_mode(mode, rng)
    z = z0
    for lp in params.layers:
        z = block_forward(z, lp, cfg, mode, rng, trace)
    return T.layer_norm(z, params.final_gain, params.final_bias, LAYER_NORM_EPS)
