"""Dataset, checkpoint and configuration persistence, plus synthetic data.

File formats (all little-endian, all bit-exact on round-trip):
  - images: binary PPM "P6", maxval 255; labels: binary PGM "P5", maxval 255,
  - dataset manifest: "key = value" text plus one "pair = <image> <labels>"
    line per sample; paths are manifest-relative, optionally prefixed by the
    SEGMENTER_DATA environment variable,
  - checkpoint: magic "SEGCKPT1" | u32 version=1 | u32 config-text length +
    UTF-8 config text | u32 tensor count | per tensor: u32 name length, name,
    u8 dtype code (0 = float32), u8 ndim, ndim x u64 dims, raw payload.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import interpolate_pos
from .errors import CheckpointError, ConfigError, ParseError
from .model import DEFAULT_MEAN, DEFAULT_STD, IGNORE_INDEX, ModelConfig, SegmenterModel
from .rng import substream
from .train import TrainConfig

CHECKPOINT_MAGIC = b"SEGCKPT1"
CHECKPOINT_VERSION = 1
DTYPE_F32 = 0

DEFAULT_PALETTE = (
    (40, 40, 40),
    (220, 70, 60),
    (60, 200, 80),
    (60, 90, 220),
    (230, 200, 50),
    (180, 60, 200),
    (70, 210, 210),
    (240, 140, 40),
    (150, 110, 70),
    (200, 200, 200),
)

SHAPE_KINDS = ("rectangle", "disk", "stripe")


# ---------------------------------------------------------------------------
# netpbm


def _parse_netpbm_header(data: bytes, magic: bytes, path: str) -> tuple[int, int, int, int]:
    """Parse 'P6'/'P5' header; returns (width, height, maxval, raster offset)."""
    if data[:2] != magic:
        raise ParseError(f"{path}: bad magic {data[:2]!r}, expected {magic!r}", offset=0)
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(data):
            raise ParseError(f"{path}: truncated header", offset=pos)
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise ParseError(f"{path}: unexpected byte {c!r} in header", offset=pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ParseError(f"{path}: missing whitespace before raster", offset=pos)
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}, only 255", offset=pos)
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: bad dimensions {width}x{height}", offset=pos)
    return width, height, maxval, pos


def read_image_ppm(path) -> np.ndarray:
    """Binary PPM -> (H, W, 3) uint8, exact byte values."""
    data = Path(path).read_bytes()
    w, h, _, pos = _parse_netpbm_header(data, b"P6", str(path))
    n = w * h * 3
    if len(data) - pos < n:
        raise ParseError(f"{path}: raster truncated, need {n} bytes", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3).copy()


def read_labels_pgm(path) -> np.ndarray:
    """Binary PGM -> (H, W) uint8 label map."""
    data = Path(path).read_bytes()
    w, h, _, pos = _parse_netpbm_header(data, b"P5", str(path))
    n = w * h
    if len(data) - pos < n:
        raise ParseError(f"{path}: raster truncated, need {n} bytes", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w).copy()


def write_image_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ConfigError(f"write_image_ppm: expected (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


def write_labels_pgm(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.dtype != np.uint8:
        raise ConfigError(f"write_labels_pgm: expected (H, W) uint8, got {labels.shape} {labels.dtype}")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# key = value text


def parse_kv_text(text: str, path: str = "<config>") -> dict[str, str]:
    """Flat 'key = value' lines; '#' starts a comment; repeated 'pair' keys allowed."""
    out: dict[str, str] = {}
    pairs: list[str] = []
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            if "=" not in stripped:
                raise ParseError(f"{path}: expected 'key = value', got {stripped!r}", offset=offset)
            key, value = stripped.split("=", 1)
            key, value = key.strip(), value.strip()
            if key == "pair":
                pairs.append(value)
            elif key in out:
                raise ParseError(f"{path}: duplicate key {key!r}", offset=offset)
            else:
                out[key] = value
        offset += len(line.encode())
    if pairs:
        out["pair"] = "\n".join(pairs)
    return out


def _typed(raw: dict[str, str], key: str, kind, default=None, required: bool = False, path: str = "<config>"):
    if key not in raw:
        if required:
            raise ConfigError(f"{path}: missing mandatory key {key!r}")
        return default
    value = raw[key]
    try:
        if kind is bool:
            if value.lower() not in ("true", "false"):
                raise ValueError(value)
            return value.lower() == "true"
        if kind == "floats3":
            parts = tuple(float(v) for v in value.split(","))
            if len(parts) != 3:
                raise ValueError(value)
            return parts
        return kind(value)
    except ValueError as e:
        raise ConfigError(f"{path}: key {key!r} has malformed value {value!r}") from e


MODEL_KEYS = {
    "variant", "patch_size", "crop_size", "n_classes", "decoder",
    "depth", "token_size", "heads", "dropout", "stochastic_depth",
    "decoder_layers", "mask_norm_both", "mask_final_ln", "mean", "std",
}
TRAIN_KEYS = {
    "base_lr", "iterations", "batch_size", "poly_power", "weight_decay",
    "momentum", "seed", "eval_every",
}
SNAPSHOT_KEYS = {"trained_iterations"}


def _model_config_from_raw(raw: dict[str, str], path: str, mean=None, std=None) -> ModelConfig:
    return ModelConfig(
        variant=_typed(raw, "variant", str, required=True, path=path),
        patch_size=_typed(raw, "patch_size", int, required=True, path=path),
        crop_size=_typed(raw, "crop_size", int, required=True, path=path),
        n_classes=_typed(raw, "n_classes", int, required=True, path=path),
        decoder_kind=_typed(raw, "decoder", str, default="linear", path=path),
        depth=_typed(raw, "depth", int, default=0, path=path),
        token_size=_typed(raw, "token_size", int, default=0, path=path),
        heads=_typed(raw, "heads", int, default=0, path=path),
        dropout_rate=_typed(raw, "dropout", float, default=0.0, path=path),
        stochastic_depth_rate=_typed(raw, "stochastic_depth", float, default=0.1, path=path),
        decoder_layers=_typed(raw, "decoder_layers", int, default=2, path=path),
        mask_norm_both=_typed(raw, "mask_norm_both", bool, default=False, path=path),
        mask_final_ln=_typed(raw, "mask_final_ln", bool, default=True, path=path),
        mean=_typed(raw, "mean", "floats3", default=tuple(mean) if mean else DEFAULT_MEAN, path=path),
        std=_typed(raw, "std", "floats3", default=tuple(std) if std else DEFAULT_STD, path=path),
    )


def parse_config(path, mean=None, std=None) -> tuple[ModelConfig, TrainConfig]:
    """Read one config file into (ModelConfig, TrainConfig); unknown keys are errors.

    `mean`/`std` are fallback normalization constants (typically the dataset
    manifest's) used when the file does not pin them.
    """
    path = str(path)
    raw = parse_kv_text(Path(path).read_text(), path)
    unknown = set(raw) - MODEL_KEYS - TRAIN_KEYS - SNAPSHOT_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    model_cfg = _model_config_from_raw(raw, path, mean, std)
    train_cfg = TrainConfig(
        base_lr=_typed(raw, "base_lr", float, default=1e-3, path=path),
        total_iterations=_typed(raw, "iterations", int, default=100, path=path),
        batch_size=_typed(raw, "batch_size", int, default=8, path=path),
        poly_power=_typed(raw, "poly_power", float, default=0.9, path=path),
        weight_decay=_typed(raw, "weight_decay", float, default=0.0, path=path),
        momentum=_typed(raw, "momentum", float, default=0.0, path=path),
        seed=_typed(raw, "seed", int, default=0, path=path),
        crop_size=model_cfg.crop_size,
        eval_every=_typed(raw, "eval_every", int, default=0, path=path),
    )
    return model_cfg, train_cfg


def model_config_text(cfg: ModelConfig, trained_iterations: int | None = None) -> str:
    """Self-describing snapshot embedded in checkpoints."""
    lines = [
        f"variant = {cfg.variant}",
        f"patch_size = {cfg.patch_size}",
        f"crop_size = {cfg.crop_size}",
        f"n_classes = {cfg.n_classes}",
        f"decoder = {cfg.decoder_kind}",
        f"dropout = {cfg.dropout_rate!r}",
        f"stochastic_depth = {cfg.stochastic_depth_rate!r}",
        f"decoder_layers = {cfg.decoder_layers}",
        f"mask_norm_both = {str(cfg.mask_norm_both).lower()}",
        f"mask_final_ln = {str(cfg.mask_final_ln).lower()}",
        "mean = " + ",".join(repr(v) for v in cfg.mean),
        "std = " + ",".join(repr(v) for v in cfg.std),
    ]
    if cfg.variant == "custom":
        lines[1:1] = [f"depth = {cfg.depth}", f"token_size = {cfg.token_size}", f"heads = {cfg.heads}"]
    if trained_iterations is not None:
        lines.append(f"trained_iterations = {trained_iterations}")
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> tuple[ModelConfig, int]:
    raw = parse_kv_text(text, "<checkpoint config>")
    unknown = set(raw) - MODEL_KEYS - SNAPSHOT_KEYS
    if unknown:
        raise CheckpointError(f"checkpoint config has unknown keys {sorted(unknown)}")
    cfg = _model_config_from_raw(raw, "<checkpoint config>")
    return cfg, _typed(raw, "trained_iterations", int, default=0)


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    labels: np.ndarray  # (H, W) uint8, ids in [0, K) or 255


@dataclass
class DatasetManifest:
    root: Path
    pairs: list[tuple[str, str]]
    n_classes: int
    class_names: list[str]
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def resolve(self, rel: str) -> Path:
        prefix = os.environ.get("SEGMENTER_DATA")
        base = Path(prefix) if prefix else self.root
        return base / rel


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    raw = parse_kv_text(path.read_text(), str(path))
    allowed = {"n_classes", "class_names", "mean", "std", "pair"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    n_classes = _typed(raw, "n_classes", int, required=True, path=str(path))
    names = _typed(raw, "class_names", str, default="", path=str(path))
    pairs = []
    for entry in raw.get("pair", "").splitlines():
        parts = entry.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}: malformed pair entry {entry!r}")
        pairs.append((parts[0], parts[1]))
    if not pairs:
        raise ConfigError(f"{path}: manifest lists no image/label pairs")
    manifest = DatasetManifest(
        root=path.parent,
        pairs=pairs,
        n_classes=n_classes,
        class_names=names.split(",") if names else [],
        mean=_typed(raw, "mean", "floats3", default=DEFAULT_MEAN, path=str(path)),
        std=_typed(raw, "std", "floats3", default=DEFAULT_STD, path=str(path)),
    )
    for img_rel, lab_rel in manifest.pairs:
        for rel in (img_rel, lab_rel):
            if not manifest.resolve(rel).exists():
                raise ConfigError(f"{path}: listed file missing: {manifest.resolve(rel)}")
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [
        "# patchseg dataset manifest",
        f"n_classes = {manifest.n_classes}",
    ]
    if manifest.class_names:
        lines.append("class_names = " + ",".join(manifest.class_names))
    lines.append("mean = " + ",".join(f"{v:.4f}" for v in manifest.mean))
    lines.append("std = " + ",".join(f"{v:.4f}" for v in manifest.std))
    lines += [f"pair = {img} {lab}" for img, lab in manifest.pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    """Load and validate every pair: matching sizes, labels in [0, K) or 255."""
    samples = []
    for img_rel, lab_rel in manifest.pairs:
        image = read_image_ppm(manifest.resolve(img_rel))
        labels = read_labels_pgm(manifest.resolve(lab_rel))
        if image.shape[:2] != labels.shape:
            raise ConfigError(
                f"{img_rel}: image {image.shape[:2]} vs labels {labels.shape} size mismatch"
            )
        bad = labels[(labels >= manifest.n_classes) & (labels != IGNORE_INDEX)]
        if bad.size:
            raise ConfigError(f"{lab_rel}: label value {int(bad[0])} outside [0, {manifest.n_classes}) u {{255}}")
        samples.append(Sample(image=image, labels=labels))
    return samples


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SegmenterModel, path, trained_iterations: int | None = None) -> None:
    """Write the model as version-1 binary (float32 payloads, names in model order)."""
    config_blob = model_config_text(model.config, trained_iterations).encode()
    named = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(named)))
        for name, t in named:
            encoded = name.encode()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            arr = t.data.astype("<f4", copy=False)
            f.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint_raw(path) -> tuple[str, int, dict[str, np.ndarray]]:
    """Low-level read: (config text, trained iterations, name -> float32 array)."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    try:
        (version,) = struct.unpack_from("<I", data, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (config_len,) = struct.unpack_from("<I", data, 12)
        pos = 16
        config_text = data[pos : pos + config_len].decode()
        pos += config_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + name_len].decode()
            pos += name_len
            dtype_code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            if dtype_code != DTYPE_F32:
                raise CheckpointError(f"{path}: tensor {name}: unknown dtype code {dtype_code}")
            dims = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            if name in tensors:
                raise CheckpointError(f"{path}: duplicate tensor name {name}")
            tensors[name] = arr
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    raw = parse_kv_text(config_text, f"{path} (embedded config)")
    trained = _typed(raw, "trained_iterations", int, default=0)
    return config_text, trained, tensors


def _fill_model(model: SegmenterModel, tensors: dict[str, np.ndarray], path,
                skip: frozenset[str] = frozenset()) -> None:
    offenders = []
    seen = set()
    for name, t in model.named_parameters():
        seen.add(name)
        if name in skip:
            continue
        stored = tensors.get(name)
        if stored is None:
            offenders.append(f"missing tensor {name}")
        elif stored.shape != t.data.shape:
            offenders.append(f"{name}: stored shape {stored.shape} vs model {t.data.shape}")
        else:
            t.data = stored.astype(model.dtype)
    extra = [n for n in tensors if n not in seen]
    offenders += [f"unexpected tensor {n}" for n in extra]
    if offenders:
        raise CheckpointError(f"{path}: checkpoint does not match model: " + "; ".join(offenders))


def load_checkpoint(path) -> tuple[SegmenterModel, int]:
    """Rebuild the model described by the embedded config; bit-exact tensors."""
    config_text, trained, tensors = read_checkpoint_raw(path)
    cfg, _ = model_config_from_text(config_text)
    model = SegmenterModel(cfg, init="zeros")
    _fill_model(model, tensors, path)
    return model, trained


def load_checkpoint_resized(path, new_image_size: int) -> tuple[SegmenterModel, int]:
    """As load_checkpoint, but bilinearly resample position embeddings to the
    patch grid of `new_image_size` (which must be divisible by the patch size)."""
    config_text, trained, tensors = read_checkpoint_raw(path)
    cfg, _ = model_config_from_text(config_text)
    if new_image_size % cfg.patch_size:
        raise ConfigError(f"new size {new_image_size} not divisible by patch size {cfg.patch_size}")
    old_grid = cfg.encoder_config().grid
    new_cfg = cfg.with_crop_size(new_image_size)
    new_grid = new_cfg.encoder_config().grid
    model = SegmenterModel(new_cfg, init="zeros")
    pos_name = "encoder.pos_embed"
    if pos_name not in tensors:
        raise CheckpointError(f"{path}: missing tensor {pos_name}")
    resized_pos = {
        **tensors,
        pos_name: interpolate_pos(tensors[pos_name].astype(np.float32), old_grid, new_grid),
    }
    _fill_model(model, resized_pos, path)
    return model, trained


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int
    height: int
    width: int
    n_classes: int
    shapes: tuple[str, ...] = SHAPE_KINDS
    colors: tuple[tuple[int, int, int], ...] | None = None  # per class; default palette
    noise_std: float = 0.0
    min_size: int = 4
    max_size: int = 16
    shapes_per_image: tuple[int, int] = (2, 4)
    grid_snap: int = 1  # snap rectangle/stripe geometry to this pixel grid
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("synthetic data needs n_classes >= 2 (background + shapes)")
        if self.grid_snap < 1:
            raise ConfigError("grid_snap must be >= 1")
        if self.colors is None and self.n_classes > len(DEFAULT_PALETTE):
            raise ConfigError(
                f"n_classes {self.n_classes} exceeds the built-in color table "
                f"({len(DEFAULT_PALETTE)}); specify color_<k> entries"
            )
        if self.colors is not None and len(self.colors) != self.n_classes:
            raise ConfigError("colors must list exactly one r,g,b triple per class")
        bad = set(self.shapes) - set(SHAPE_KINDS)
        if bad:
            raise ConfigError(f"unknown shape kinds {sorted(bad)}")
        if not self.shapes:
            raise ConfigError("at least one shape kind required")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigError("need 1 <= min_size <= max_size")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError("shapes_per_image range invalid")

    @property
    def palette(self) -> np.ndarray:
        colors = self.colors if self.colors is not None else DEFAULT_PALETTE[: self.n_classes]
        return np.asarray(colors, dtype=np.float64)


@dataclass(frozen=True)
class Shape:
    kind: str
    class_id: int
    params: tuple[int, ...]  # rectangle: y0,x0,h,w; disk: cy,cx,r; stripe: axis,start,thickness

    def to_line(self) -> str:
        return " ".join([self.kind, str(self.class_id), *map(str, self.params)])

    @staticmethod
    def from_line(line: str) -> "Shape":
        parts = line.split()
        return Shape(parts[0], int(parts[1]), tuple(int(v) for v in parts[2:]))


def rasterize(shapes: list[Shape], height: int, width: int) -> np.ndarray:
    """Draw shapes in order onto a zero (background) map; later shapes are on top."""
    labels = np.zeros((height, width), dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width]
    for s in shapes:
        if s.kind == "rectangle":
            y0, x0, h, w = s.params
            labels[y0 : y0 + h, x0 : x0 + w] = s.class_id
        elif s.kind == "disk":
            cy, cx, r = s.params
            labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = s.class_id
        elif s.kind == "stripe":
            axis, start, thickness = s.params
            if axis == 0:
                labels[start : start + thickness, :] = s.class_id
            else:
                labels[:, start : start + thickness] = s.class_id
        else:
            raise ConfigError(f"unknown shape kind {s.kind!r}")
    return labels


def _snap(value: int, snap: int, lo: int, hi: int) -> int:
    return int(np.clip(round(value / snap) * snap, lo, hi))


def _sample_shapes(spec: SyntheticSpec, rng: np.random.Generator) -> list[Shape]:
    lo, hi = spec.shapes_per_image
    n = int(rng.integers(lo, hi + 1))
    snap = spec.grid_snap
    shapes = []
    for _ in range(n):
        kind = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        class_id = int(rng.integers(1, spec.n_classes))
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        if kind == "rectangle":
            h = _snap(size, snap, snap, spec.height)
            w = _snap(int(rng.integers(spec.min_size, spec.max_size + 1)), snap, snap, spec.width)
            y0 = _snap(int(rng.integers(0, max(1, spec.height - h + 1))), snap, 0, spec.height - h)
            x0 = _snap(int(rng.integers(0, max(1, spec.width - w + 1))), snap, 0, spec.width - w)
            shapes.append(Shape(kind, class_id, (y0, x0, h, w)))
        elif kind == "disk":  # disks are round; grid_snap only places the box
            r = max(1, size // 2)
            cy = int(rng.integers(r, max(r + 1, spec.height - r)))
            cx = int(rng.integers(r, max(r + 1, spec.width - r)))
            shapes.append(Shape(kind, class_id, (cy, cx, r)))
        else:  # stripe across the full image
            axis = int(rng.integers(0, 2))
            extent = spec.height if axis == 0 else spec.width
            thickness = _snap(size, snap, snap, extent) if snap > 1 else size
            start_raw = int(rng.integers(0, max(1, extent - thickness + 1)))
            start = _snap(start_raw, snap, 0, extent - thickness) if snap > 1 else start_raw
            shapes.append(Shape(kind, class_id, (axis, start, thickness)))
    return shapes


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write PPM/PGM pairs + shapes.txt + manifest; returns the manifest path.

    Deterministic from spec.seed: per-image substreams, so extending n_images
    keeps earlier files byte-identical.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    palette = spec.palette
    pairs = []
    shape_lines = []
    acc = np.zeros(3)
    acc_sq = np.zeros(3)
    n_pix = 0
    for i in range(spec.n_images):
        rng = substream(spec.seed, "synth", i)
        shapes = _sample_shapes(spec, rng)
        labels = rasterize(shapes, spec.height, spec.width)
        image = palette[labels]
        if spec.noise_std > 0:
            image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
        image_u8 = np.clip(np.rint(image), 0, 255).astype(np.uint8)
        img_rel = f"images/img_{i:05d}.ppm"
        lab_rel = f"labels/lab_{i:05d}.pgm"
        write_image_ppm(out / img_rel, image_u8)
        write_labels_pgm(out / lab_rel, labels)
        pairs.append((img_rel, lab_rel))
        shape_lines.append(f"image {i}")
        shape_lines += [s.to_line() for s in shapes]
        flat = image_u8.reshape(-1, 3).astype(np.float64)
        acc += flat.sum(axis=0)
        acc_sq += (flat**2).sum(axis=0)
        n_pix += flat.shape[0]
    mean = acc / n_pix
    std = np.sqrt(np.maximum(acc_sq / n_pix - mean**2, 0.0))
    std = np.maximum(std, 1.0)  # guard against constant-color datasets
    (out / "shapes.txt").write_text("\n".join(shape_lines) + "\n")
    manifest = DatasetManifest(
        root=out,
        pairs=pairs,
        n_classes=spec.n_classes,
        class_names=[],
        mean=tuple(round(v, 4) for v in mean),
        std=tuple(round(v, 4) for v in std),
    )
    manifest_path = out / "manifest.txt"
    write_manifest(manifest, manifest_path)
    return manifest_path


def read_shape_log(path) -> dict[int, list[Shape]]:
    """Parse shapes.txt back into per-image shape lists (for re-rasterization)."""
    result: dict[int, list[Shape]] = {}
    current: list[Shape] | None = None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("image "):
            current = result.setdefault(int(line.split()[1]), [])
        else:
            current.append(Shape.from_line(line))
    return result


SYNTH_KEYS = {
    "n_images", "height", "width", "n_classes", "shapes", "noise_std",
    "min_size", "max_size", "shapes_per_image", "grid_snap", "seed",
}


def parse_synthetic_spec(path) -> SyntheticSpec:
    path = str(path)
    raw = parse_kv_text(Path(path).read_text(), path)
    color_keys = {k for k in raw if k.startswith("color_")}
    unknown = set(raw) - SYNTH_KEYS - color_keys
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    n_classes = _typed(raw, "n_classes", int, required=True, path=path)
    colors = None
    if color_keys:
        expected = {f"color_{k}" for k in range(n_classes)}
        if color_keys != expected:
            raise ConfigError(f"{path}: need exactly color_0..color_{n_classes - 1}, got {sorted(color_keys)}")
        colors = tuple(
            tuple(int(v) for v in raw[f"color_{k}"].split(",")) for k in range(n_classes)
        )
        if any(len(c) != 3 or not all(0 <= v <= 255 for v in c) for c in colors):
            raise ConfigError(f"{path}: colors must be r,g,b in [0, 255]")
    spi_raw = raw.get("shapes_per_image", "2,4")
    spi = tuple(int(v) for v in spi_raw.split(","))
    if len(spi) == 1:
        spi = (spi[0], spi[0])
    shapes = tuple(s.strip() for s in raw.get("shapes", ",".join(SHAPE_KINDS)).split(","))
    return SyntheticSpec(
        n_images=_typed(raw, "n_images", int, required=True, path=path),
        height=_typed(raw, "height", int, required=True, path=path),
        width=_typed(raw, "width", int, required=True, path=path),
        n_classes=n_classes,
        shapes=shapes,
        colors=colors,
        noise_std=_typed(raw, "noise_std", float, default=0.0, path=path),
        min_size=_typed(raw, "min_size", int, default=4, path=path),
        max_size=_typed(raw, "max_size", int, default=16, path=path),
        shapes_per_image=spi,
        grid_snap=_typed(raw, "grid_snap", int, default=1, path=path),
        seed=_typed(raw, "seed", int, default=0, path=path),
    )
