"""Decoders mapping patch encodings (N, D) to patch-level class logits (N, K).

Two kinds: a point-wise linear head, and a mask transformer that appends K
learnable class embeddings to the patch sequence, runs them jointly through
transformer blocks, and scores patches by scalar product with the class rows.
Only the patch rows are L2-normalized before the product (a flag enables
normalizing the class rows too).
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .encoder import (
    LAYER_NORM_EPS,
    EncoderConfig,
    ForwardTrace,
    LayerParams,
    _check_mode,
    _linear_params,
    _ln_params,
    block_forward,
)
from .errors import ConfigError, ShapeError
from .tensor import Tensor

DECODER_KINDS = ("linear", "mask")


class LinearDecoderParams:
    def __init__(self, token_size: int, n_classes: int, rng: np.random.Generator,
                 dtype=np.float32, init: str = "trunc_normal"):
        self.weight, self.bias = _linear_params(rng, token_size, n_classes, dtype, init)

    def named(self, prefix: str = "decoder") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class MaskDecoderParams:
    """Class embedding table plus M transformer blocks shaped like the encoder's."""

    def __init__(self, enc_cfg: EncoderConfig, n_classes: int, rng: np.random.Generator,
                 n_layers: int = 2, final_ln: bool = True, dtype=np.float32,
                 init: str = "trunc_normal"):
        d = enc_cfg.token_size
        if init == "zeros":
            cls = np.zeros((n_classes, d), dtype=dtype)
        else:
            cls = T.trunc_normal(rng, (n_classes, d), std=0.02, dtype=dtype)
        self.cls_embed = Tensor(cls, requires_grad=True)
        self.layers = [LayerParams(enc_cfg, rng, dtype, init) for _ in range(n_layers)]
        if final_ln:
            self.final_gain, self.final_bias = _ln_params(d, dtype)
        else:
            self.final_gain = self.final_bias = None

    def named(self, prefix: str = "decoder") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.cls_embed", self.cls_embed
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layers.{i}")
        if self.final_gain is not None:
            yield f"{prefix}.final_ln.gain", self.final_gain
            yield f"{prefix}.final_ln.bias", self.final_bias


def linear_decode(z: Tensor, params: LinearDecoderParams) -> Tensor:
    """Point-wise linear class logits; no upsampling here."""
    if z.shape[1] != params.weight.shape[0]:
        raise ShapeError(f"linear_decode: token size {z.shape[1]} vs weight {params.weight.shape}")
    return T.add_bias(T.matmul(z, params.weight), params.bias)


def mask_decode(
    z: Tensor,
    params: MaskDecoderParams,
    enc_cfg: EncoderConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    normalize_both: bool = False,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """Joint processing of [patches; class embeddings], then mask logits.

    Returns z'_M . c^T where z'_M are the L2-normalized patch rows and c the
    class rows after the decoder blocks.
    """
    _check_mode(mode, rng)
    if z.shape[1] != params.cls_embed.shape[1]:
        raise ShapeError(f"mask_decode: token size {z.shape[1]} vs class embeddings {params.cls_embed.shape}")
    n = z.shape[0]
    k = params.cls_embed.shape[0]
    seq = T.concat([z, params.cls_embed], axis=0)
    for lp in params.layers:
        seq = block_forward(seq, lp, enc_cfg, mode, rng, trace)
    if params.final_gain is not None:
        seq = T.layer_norm(seq, params.final_gain, params.final_bias, LAYER_NORM_EPS)
    patches = T.l2_normalize(T.slice_axis(seq, 0, 0, n), axis=-1)
    cls_rows = T.slice_axis(seq, 0, n, k)
    if normalize_both:
        cls_rows = T.l2_normalize(cls_rows, axis=-1)
    return T.matmul(patches, T.transpose(cls_rows))


def decode(
    z: Tensor,
    kind: str,
    params,
    enc_cfg: EncoderConfig | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    normalize_both: bool = False,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """Dispatch to the configured decoder; identical (N, K) output contract."""
    if kind == "linear":
        return linear_decode(z, params)
    if kind == "mask":
        return mask_decode(z, params, enc_cfg, mode, rng, normalize_both, trace)
    raise ConfigError(f"unknown decoder kind {kind!r}; expected one of {DECODER_KINDS}")
