"""End-to-end model: image in, per-pixel class logits out, plus the training loss.

The forward path is patchify -> embed -> encoder -> decode -> reshape to the
patch grid -> bilinear upsample to pixel resolution.  Loss is mean pixel-wise
cross-entropy on the full-resolution logits, ignore id 255 excluded.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import decoder as D
from . import encoder as E
from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import substream
from .tensor import Tensor

# variant -> (depth, token size, heads); head size is fixed at 64
VARIANT_PRESETS = {
    "Ti": (12, 192, 3),
    "S": (12, 384, 6),
    "B": (12, 768, 12),
    "L": (24, 1024, 16),
}

IGNORE_INDEX = 255

DEFAULT_MEAN = (127.5, 127.5, 127.5)
DEFAULT_STD = (127.5, 127.5, 127.5)


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    patch_size: int
    crop_size: int
    n_classes: int
    decoder_kind: str = "linear"
    # encoder geometry; filled from the variant preset unless variant == "custom"
    depth: int = 0
    token_size: int = 0
    heads: int = 0
    dropout_rate: float = 0.0
    stochastic_depth_rate: float = 0.1
    decoder_layers: int = 2
    mask_norm_both: bool = False
    mask_final_ln: bool = True
    mean: tuple[float, float, float] = DEFAULT_MEAN
    std: tuple[float, float, float] = DEFAULT_STD

    def __post_init__(self):
        if self.variant in VARIANT_PRESETS:
            depth, token_size, heads = VARIANT_PRESETS[self.variant]
            for name, got, want in (("depth", self.depth, depth),
                                    ("token_size", self.token_size, token_size),
                                    ("heads", self.heads, heads)):
                if got not in (0, want):
                    raise ConfigError(f"variant {self.variant} fixes {name}={want}, got {got}")
            object.__setattr__(self, "depth", depth)
            object.__setattr__(self, "token_size", token_size)
            object.__setattr__(self, "heads", heads)
        elif self.variant == "custom":
            if not (self.depth > 0 and self.token_size > 0 and self.heads > 0):
                raise ConfigError("variant 'custom' requires depth, token_size and heads")
        else:
            raise ConfigError(f"unknown variant {self.variant!r}; expected Ti|S|B|L|custom")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.decoder_kind not in D.DECODER_KINDS:
            raise ConfigError(f"unknown decoder kind {self.decoder_kind!r}")
        if self.decoder_layers < 0:
            raise ConfigError("decoder_layers must be >= 0")
        if len(self.mean) != 3 or len(self.std) != 3 or any(s <= 0 for s in self.std):
            raise ConfigError("mean/std must be 3 per-channel values with positive std")
        self.encoder_config()  # validates crop/patch/head geometry

    def encoder_config(self, image_size: tuple[int, int] | None = None) -> E.EncoderConfig:
        return E.EncoderConfig(
            image_size=image_size or (self.crop_size, self.crop_size),
            patch_size=self.patch_size,
            depth=self.depth,
            token_size=self.token_size,
            heads=self.heads,
            dropout_rate=self.dropout_rate,
            stochastic_depth_rate=self.stochastic_depth_rate,
        )

    def with_crop_size(self, crop_size: int) -> "ModelConfig":
        return replace(self, crop_size=crop_size)


def normalize_image(image_u8: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel (x - mean) / std on an (H, W, 3) byte image -> float32."""
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return (image_u8.astype(np.float32) - mean) / std


class SegmenterModel:
    """Named-parameter collection for the encoder, decoder and embeddings."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, init: str = "trunc_normal"):
        self.config = config
        self.dtype = np.dtype(dtype)
        enc_cfg = config.encoder_config()
        rng = substream(seed, "init")
        self.encoder = E.EncoderParams(enc_cfg, rng, dtype, init)
        if config.decoder_kind == "linear":
            self.decoder = D.LinearDecoderParams(config.token_size, config.n_classes, rng, dtype, init)
        else:
            self.decoder = D.MaskDecoderParams(
                enc_cfg, config.n_classes, rng,
                n_layers=config.decoder_layers, final_ln=config.mask_final_ln,
                dtype=dtype, init=init,
            )

    @property
    def enc_cfg(self) -> E.EncoderConfig:
        return self.config.encoder_config()

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named("encoder")
        yield from self.decoder.named("decoder")

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def zero_grads(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def _check_input(self, image: Tensor) -> None:
        h = w = self.config.crop_size
        if image.data.ndim != 3 or image.shape != (h, w, 3):
            raise ShapeError(f"forward: expected a normalized ({h}, {w}, 3) image, got {image.shape}")

    def patch_logits(
        self,
        image: Tensor,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        trace: E.ForwardTrace | None = None,
    ) -> Tensor:
        """Class logits on the patch grid, shape (H/P, W/P, K), pre-upsampling."""
        self._check_input(image)
        cfg = self.enc_cfg
        patches = E.patchify(image, cfg.patch_size)
        z0 = E.embed(patches, self.encoder)
        z = E.encoder_forward(z0, self.encoder, cfg, mode, rng, trace)
        logits = D.decode(
            z, self.config.decoder_kind, self.decoder, cfg, mode, rng,
            normalize_both=self.config.mask_norm_both,
        )
        gh, gw = cfg.grid
        return T.reshape(logits, (gh, gw, self.config.n_classes))


    def forward(
        self,
        image: Tensor,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        trace: E.ForwardTrace | None = None,
    ) -> Tensor:
        """Per-pixel class logits, shape (H, W, K)."""
        grid_logits = self.patch_logits(image, mode, rng, trace)
        h = w = self.config.crop_size
        return T.bilinear_upsample(grid_logits, h, w)

    def predict(self, image: Tensor | np.ndarray) -> np.ndarray:
        """Per-pixel argmax labels (ties resolved to the lowest class id)."""
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=np.float32))
        with T.no_grad():
            logits = self.forward(image, mode="eval")
        return np.argmax(logits.data, axis=-1).astype(np.int64)


def loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over non-ignored pixels (ignore id 255)."""
    return T.cross_entropy(logits, labels, ignore_index=IGNORE_INDEX)
