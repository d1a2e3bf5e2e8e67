"""Sliding-window and multi-scale inference, IoU metrics, and model analyses.

Inference conventions: within one scale, overlapping window logits are
averaged; across scales (and the flipped pass) probability maps are averaged
after softmax, which avoids logit-magnitude mismatch between resized runs.
Window stride defaults to half the window.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from . import model as M
from . import tensor as T
from .encoder import ForwardTrace
from .errors import ConfigError, ShapeError, UnsupportedOperationError
from .tensor import Tensor

MULTISCALE_FACTORS = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)

# COCO-style pixel-area bands over ground-truth connected components
SIZE_BANDS = ((0, 32 * 32), (32 * 32, 96 * 96), (96 * 96, None))
SIZE_BAND_NAMES = ("small", "medium", "large")


class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns prediction; 255 excluded."""

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ConfigError("ConfusionMatrix needs n_classes >= 1")
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> None:
        if pred.shape != gt.shape:
            raise ShapeError(f"confusion update: pred {pred.shape} vs gt {gt.shape}")
        valid = gt != M.IGNORE_INDEX
        if mask is not None:
            valid &= mask
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        np.add.at(self.counts, (g, p), 1)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where a class is absent from both gt and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> tuple[float, np.ndarray]:
        """(mean IoU over classes present in gt or prediction, per-class vector).

        An empty matrix has no defined mIoU and yields NaN.
        """
        per_class = self.iou()
        if np.isnan(per_class).all():
            return float("nan"), per_class
        return float(np.nanmean(per_class)), per_class


def miou(confusion: ConfusionMatrix) -> tuple[float, np.ndarray]:
    return confusion.miou()


def sliding_window_logits(model: M.SegmenterModel, image: np.ndarray,
                          window: int | None = None, stride: int | None = None) -> np.ndarray:
    """Average overlapping window logits over an arbitrary-size normalized image.

    Windows are placed at stride steps, the last one clamped to the border;
    images smaller than the window are zero-padded (normalization-neutral)
    and cropped back.  Returns (H, W, K) float32 logits.
    """
    window = window or model.config.crop_size
    stride = stride or max(1, window // 2)
    if window != model.config.crop_size:
        raise ConfigError(f"window {window} must equal the model crop size {model.config.crop_size}")
    if stride > window or stride < 1:
        raise ConfigError(f"stride {stride} must be in [1, window]")
    h, w = image.shape[:2]
    ph, pw = max(h, window), max(w, window)
    padded = image
    if (ph, pw) != (h, w):
        padded = np.zeros((ph, pw, 3), dtype=image.dtype)
        padded[:h, :w] = image
    acc = np.zeros((ph, pw, model.config.n_classes), dtype=np.float64)
    coverage = np.zeros((ph, pw, 1), dtype=np.float64)
    ys = sorted({min(y, ph - window) for y in range(0, ph - window + stride, stride)})
    xs = sorted({min(x, pw - window) for x in range(0, pw - window + stride, stride)})
    with T.no_grad():
        for y in ys:
            for x in xs:
                tile = Tensor(np.ascontiguousarray(padded[y : y + window, x : x + window]))
                logits = model.forward(tile, mode="eval").data
                acc[y : y + window, x : x + window] += logits
                coverage[y : y + window, x : x + window] += 1.0
    out = (acc / coverage).astype(np.float32)
    return out[:h, :w]


def multiscale_predict(model: M.SegmenterModel, image: np.ndarray,
                       scales: tuple[float, ...] = MULTISCALE_FACTORS,
                       flip: bool = True, stride: int | None = None) -> np.ndarray:
    """Average softmax probability maps over rescaled (and flipped) runs, argmax.

    Per scale: resize, sliding-window logits, softmax, resize the probability
    map back to the input size; the flipped branch is un-flipped before
    averaging.
    """
    h, w = image.shape[:2]
    total = np.zeros((h, w, model.config.n_classes), dtype=np.float64)
    n_maps = 0
    for s in scales:
        nh, nw = max(1, round(h * s)), max(1, round(w * s))
        scaled = T.resample_bilinear(image, nh, nw)
        views = [scaled, scaled[:, ::-1]] if flip else [scaled]
        for i, view in enumerate(views):
            logits = sliding_window_logits(model, np.ascontiguousarray(view), stride=stride)
            probs = T.softmax(Tensor(logits), axis=-1).data
            if i == 1:
                probs = probs[:, ::-1]
            total += T.resample_bilinear(probs.astype(np.float64), h, w)
            n_maps += 1
    return np.argmax(total / n_maps, axis=-1).astype(np.int64)


# ---------------------------------------------------------------------------
# size-stratified IoU


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connectivity labeling of a boolean mask; returns (labels, count).

    Component ids start at 1; background stays 0.
    """
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            current += 1
            queue = deque([(sy, sx)])
            labels[sy, sx] = current
            while queue:
                y, x = queue.popleft()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = current
                        queue.append((ny, nx))
    return labels, current


def size_band_masks(gt: np.ndarray, n_classes: int,
                    bands=SIZE_BANDS) -> list[np.ndarray]:
    """Partition non-ignored gt pixels into boolean masks by component area."""
    masks = [np.zeros(gt.shape, dtype=bool) for _ in bands]
    for k in range(n_classes):
        comp, count = connected_components(gt == k)
        for c in range(1, count + 1):
            where = comp == c
            area = int(where.sum())
            for b, (lo, hi) in enumerate(bands):
                if area >= lo and (hi is None or area < hi):
                    masks[b] |= where
                    break
    return masks


def size_stratified_iou(pred: np.ndarray, gt: np.ndarray, n_classes: int,
                        bands=SIZE_BANDS) -> dict[str, float]:
    """mIoU restricted to pixels of gt components within each area band."""
    out = {}
    for name, mask in zip(SIZE_BAND_NAMES, size_band_masks(gt, n_classes, bands)):
        conf = ConfusionMatrix(n_classes)
        conf.update(pred, gt, mask=mask)
        out[name] = conf.miou()[0]
    return out


def dataset_size_stratified_iou(preds, gts, n_classes: int,
                                bands=SIZE_BANDS) -> dict[str, float]:
    """Size-stratified mIoU with band confusions accumulated over a dataset."""
    confs = {name: ConfusionMatrix(n_classes) for name in SIZE_BAND_NAMES}
    for pred, gt in zip(preds, gts):
        for name, mask in zip(SIZE_BAND_NAMES, size_band_masks(gt, n_classes, bands)):
            confs[name].update(pred, gt, mask=mask)
    return {name: c.miou()[0] for name, c in confs.items()}


# ---------------------------------------------------------------------------
# analyses


def patch_center_distances(grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """(N, N) Euclidean distances between patch centers, in pixels."""
    gh, gw = grid
    centers_y = (np.repeat(np.arange(gh), gw) + 0.5) * patch_size
    centers_x = (np.tile(np.arange(gw), gh) + 0.5) * patch_size
    return np.sqrt(
        (centers_y[:, None] - centers_y[None, :]) ** 2
        + (centers_x[:, None] - centers_x[None, :]) ** 2
    )


def mean_attention_distance(attn: np.ndarray, dist: np.ndarray) -> float:
    """Average over queries of sum_k A[q, k] * dist[q, k]."""
    return float((attn * dist).sum() / attn.shape[0])


def attention_distance(model: M.SegmenterModel, images) -> np.ndarray:
    """Mean attention-weighted distance between patch centers, in pixels.

    Returns (layers, heads): for each layer/head the average over queries and
    images of sum_k A[q, k] * dist(center_q, center_k).
    """
    cfg = model.enc_cfg
    dist = patch_center_distances(cfg.grid, cfg.patch_size)
    total = np.zeros((cfg.depth, cfg.heads), dtype=np.float64)
    n_images = 0
    with T.no_grad():
        for image in images:
            if not isinstance(image, Tensor):
                image = Tensor(np.asarray(image, dtype=np.float32))
            trace = ForwardTrace()
            model.patch_logits(image, mode="eval", trace=trace)
            for li in range(cfg.depth):
                for hi in range(cfg.heads):
                    total[li, hi] += mean_attention_distance(trace.attention[li][hi], dist)
            n_images += 1
    if n_images == 0:
        raise ConfigError("attention_distance: no images given")
    return total / n_images


def _power_iteration_top_eigen(gram: np.ndarray, tol: float = 1e-10,
                               max_iter: int = 10000) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD matrix by power iteration."""
    d = gram.shape[0]
    v = np.full(d, 1.0 / np.sqrt(d))
    eig = 0.0
    for _ in range(max_iter):
        nv = gram @ v
        norm = np.linalg.norm(nv)
        if norm == 0.0:
            return 0.0, v
        nv /= norm
        new_eig = float(nv @ gram @ nv)
        if abs(new_eig - eig) <= tol * max(1.0, abs(new_eig)) and np.linalg.norm(nv - v * np.sign(nv @ v)) <= tol:
            v, eig = nv, new_eig
            break
        v, eig = nv, new_eig
    return eig, v


def top_right_singular_vectors(mat: np.ndarray, k: int = 2, tol: float = 1e-10
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Top-k right singular vectors and values via power iteration + deflation.

    Sign convention: the first nonzero coordinate of each vector is positive.
    """
    gram = mat.T @ mat
    vectors = []
    values = []
    for _ in range(k):
        eig, v = _power_iteration_top_eigen(gram, tol)
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        vectors.append(v)
        values.append(np.sqrt(max(eig, 0.0)))
        gram = gram - eig * np.outer(v, v)
    return np.stack(vectors, axis=1), np.asarray(values)


def class_embedding_projection(model: M.SegmenterModel) -> np.ndarray:
    """Project mean-centered class embeddings onto their top-2 right singular
    vectors; only defined for the mask decoder."""
    if model.config.decoder_kind != "mask":
        raise UnsupportedOperationError("class embeddings exist only for the mask decoder")
    cls = model.decoder.cls_embed.data.astype(np.float64)
    centered = cls - cls.mean(axis=0, keepdims=True)
    vecs, _ = top_right_singular_vectors(centered, k=2)
    return centered @ vecs


def evaluate_dataset(model: M.SegmenterModel, samples, multiscale: bool = False,
                     stride: int | None = None) -> tuple[ConfusionMatrix, list[np.ndarray]]:
    """Predict every sample (single-scale sliding window by default) and
    accumulate one confusion matrix; also returns the predictions."""
    conf = ConfusionMatrix(model.config.n_classes)
    preds = []
    for s in samples:
        image = M.normalize_image(s.image, model.config.mean, model.config.std)
        if multiscale:
            pred = multiscale_predict(model, image, stride=stride)
        else:
            pred = np.argmax(sliding_window_logits(model, image, stride=stride), axis=-1)
        conf.update(pred, s.labels)
        preds.append(pred.astype(np.int64))
    return conf, preds
