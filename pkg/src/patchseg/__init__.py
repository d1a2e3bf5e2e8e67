"""Patch-transformer semantic segmentation with a self-contained autodiff core."""

__version__ = "0.1.0"

from .data_io import (  # noqa: F401
    DatasetManifest,
    Sample,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_checkpoint_resized,
    load_manifest,
    load_samples,
    parse_config,
    save_checkpoint,
)
from .model import ModelConfig, SegmenterModel, loss, normalize_image  # noqa: F401
from .tensor import Tensor, backward, no_grad  # noqa: F401
from .train import TrainConfig, augment, poly_lr, sgd_step, train_loop  # noqa: F401
