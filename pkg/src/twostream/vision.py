"""Image encoder, vision-stream classifier, and saliency-based localization.

The backbone is a small three-block convnet (3x3 convs with 16/32/64
channels, 2x2 max pools, global average pool).  A linear projection of the
pooled features is the shared image embedding; a linear head on top of the
projection produces the class logits.  Localization derives a saliency map
from the gradient of the top class logit w.r.t. the input pixels and boxes
the largest connected high-saliency component.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ShapeError

IMAGE_SIZE = 64

# localization defaults; see extract_box
SALIENCY_THRESHOLD_FRAC = 0.25
BOX_MARGIN_FRAC = 0.05


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box: columns x0..x1-1, rows y0..y1-1."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.width * self.height + other.width * other.height - inter
        return inter / union if union else 0.0


@dataclass
class ClassScores:
    """Per-class probabilities: nonnegative, summing to one."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or np.any(s < 0) or abs(s.sum() - 1.0) > 1e-9:
            raise ValueError("class scores must be a probability vector")
        self.scores = s

    @property
    def num_classes(self) -> int:
        return self.scores.shape[0]

    def argmax(self) -> int:
        return int(np.argmax(self.scores))  # first index on ties


@dataclass
class VisionParams:
    conv1_w: np.ndarray  # (16, 3, 3, 3)
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # (32, 16, 3, 3)
    conv2_b: np.ndarray
    conv3_w: np.ndarray  # (64, 32, 3, 3)
    conv3_b: np.ndarray
    proj_w: np.ndarray  # (embed_dim, 64)
    proj_b: np.ndarray
    cls_w: np.ndarray  # (K, embed_dim)
    cls_b: np.ndarray

    def to_dict(self) -> dict[str, np.ndarray]:
        return {
            "conv1_w": self.conv1_w, "conv1_b": self.conv1_b,
            "conv2_w": self.conv2_w, "conv2_b": self.conv2_b,
            "conv3_w": self.conv3_w, "conv3_b": self.conv3_b,
            "proj_w": self.proj_w, "proj_b": self.proj_b,
            "cls_w": self.cls_w, "cls_b": self.cls_b,
        }

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "VisionParams":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.proj_w.shape[0]


def init_vision_params(rng: np.random.Generator, num_classes: int,
                       embed_dim: int = 64) -> VisionParams:
    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return VisionParams(
        conv1_w=he((16, 3, 3, 3), 3 * 9),
        conv1_b=np.zeros(16),
        conv2_w=he((32, 16, 3, 3), 16 * 9),
        conv2_b=np.zeros(32),
        conv3_w=he((64, 32, 3, 3), 32 * 9),
        conv3_b=np.zeros(64),
        proj_w=he((embed_dim, 64), 64),
        proj_b=np.zeros(embed_dim),
        cls_w=he((num_classes, embed_dim), embed_dim),
        cls_b=np.zeros(num_classes),
    )


# ---------------------------------------------------------------------------
# forward / backward


def vision_forward(imgs: np.ndarray, p: VisionParams
                   ) -> tuple[np.ndarray, np.ndarray, tuple]:
    """imgs: (B, 3, H, W).  Returns (features (B, d), logits (B, K), cache)."""
    if imgs.ndim != 4 or imgs.shape[1] != p.conv1_w.shape[1]:
        raise ShapeError(f"vision input {imgs.shape} vs conv1 {p.conv1_w.shape}")
    c1, c1c = T.conv2d_forward(imgs, p.conv1_w, p.conv1_b)
    r1, r1c = T.relu_forward(c1)
    p1, p1c = T.maxpool2d_forward(r1, 2, 2)
    c2, c2c = T.conv2d_forward(p1, p.conv2_w, p.conv2_b)
    r2, r2c = T.relu_forward(c2)
    p2, p2c = T.maxpool2d_forward(r2, 2, 2)
    c3, c3c = T.conv2d_forward(p2, p.conv3_w, p.conv3_b)
    r3, r3c = T.relu_forward(c3)
    gap = r3.mean(axis=(2, 3))  # (B, 64)
    feat, projc = T.linear_forward(gap, p.proj_w, p.proj_b)
    logits, clsc = T.linear_forward(feat, p.cls_w, p.cls_b)
    cache = (c1c, r1c, p1c, c2c, r2c, p2c, c3c, r3c, r3.shape, projc, clsc)
    return feat, logits, cache


def vision_backward(dfeat: Optional[np.ndarray], dlogits: Optional[np.ndarray],
                    cache: tuple, need_dx: bool = False
                    ) -> tuple[dict[str, np.ndarray], Optional[np.ndarray]]:
    """Backprop from gradients on features and/or logits."""
    c1c, r1c, p1c, c2c, r2c, p2c, c3c, r3c, r3_shape, projc, clsc = cache
    if dlogits is not None:
        dfeat_cls, dcls_w, dcls_b = T.linear_backward(dlogits, clsc)
    else:
        dfeat_cls = 0.0
        dcls_w = np.zeros_like(clsc[1])
        dcls_b = np.zeros(clsc[1].shape[0])
    total_dfeat = dfeat_cls + (dfeat if dfeat is not None else 0.0)
    dgap, dproj_w, dproj_b = T.linear_backward(np.asarray(total_dfeat), projc)
    area = r3_shape[2] * r3_shape[3]
    dr3 = np.broadcast_to(dgap[:, :, None, None] / area, r3_shape).copy()
    dc3 = T.relu_backward(dr3, r3c)
    dp2, dconv3_w, dconv3_b = T.conv2d_backward(dc3, c3c)
    dr2 = T.maxpool2d_backward(dp2, p2c)
    dc2 = T.relu_backward(dr2, r2c)
    dp1, dconv2_w, dconv2_b = T.conv2d_backward(dc2, c2c)
    dr1 = T.maxpool2d_backward(dp1, p1c)
    dc1 = T.relu_backward(dr1, r1c)
    dx, dconv1_w, dconv1_b = T.conv2d_backward(dc1, c1c)
    grads = {
        "conv1_w": dconv1_w, "conv1_b": dconv1_b,
        "conv2_w": dconv2_w, "conv2_b": dconv2_b,
        "conv3_w": dconv3_w, "conv3_b": dconv3_b,
        "proj_w": dproj_w, "proj_b": dproj_b,
        "cls_w": dcls_w, "cls_b": dcls_b,
    }
    return grads, (dx if need_dx else None)


def image_forward(img: np.ndarray, p: VisionParams) -> tuple[np.ndarray, ClassScores]:
    """Single image -> (shared feature theta(v), softmax class scores)."""
    feat, logits, _ = vision_forward(img[None], p)
    return feat[0], ClassScores(T.softmax(logits[0]))


def vision_features(imgs: np.ndarray, p: VisionParams, batch_size: int = 64) -> np.ndarray:
    """(N, d) shared image features, computed in batches."""
    out = np.empty((imgs.shape[0], p.embed_dim))
    for start in range(0, imgs.shape[0], batch_size):
        feat, _, _ = vision_forward(imgs[start : start + batch_size], p)
        out[start : start + feat.shape[0]] = feat
    return out


# ---------------------------------------------------------------------------
# saliency and localization


def saliency_maps(imgs: np.ndarray, p: VisionParams) -> np.ndarray:
    """Batched saliency: |d(max logit)/d pixel|, maxed over channels -> (B, H, W)."""
    _, logits, cache = vision_forward(imgs, p)
    dlogits = np.zeros_like(logits)
    dlogits[np.arange(logits.shape[0]), logits.argmax(axis=1)] = 1.0
    _, dx = vision_backward(None, dlogits, cache, need_dx=True)
    return np.abs(dx).max(axis=1)


def saliency_map(img: np.ndarray, p: VisionParams) -> np.ndarray:
    return saliency_maps(img[None], p)[0]


def extract_box(saliency: np.ndarray,
                threshold_frac: float = SALIENCY_THRESHOLD_FRAC,
                margin_frac: float = BOX_MARGIN_FRAC) -> tuple[BoundingBox, bool]:
    """Box around the largest 4-connected high-saliency component.

    Returns (box, fallback) where fallback is True when the map had no
    positive entries and the full image box was substituted.
    """
    h, w = saliency.shape
    peak = saliency.max()
    if peak <= 0.0:
        return BoundingBox(0, 0, w, h), True
    mask = saliency >= threshold_frac * peak
    labels, count = ndimage.label(mask)  # default structure = 4-connectivity
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    best = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == best)
    my = int(round(margin_frac * h))
    mx = int(round(margin_frac * w))
    return BoundingBox(
        x0=max(0, int(xs.min()) - mx),
        y0=max(0, int(ys.min()) - my),
        x1=min(w, int(xs.max()) + 1 + mx),
        y1=min(h, int(ys.max()) + 1 + my),
    ), False


def crop_and_resize(img: np.ndarray, box: BoundingBox, out_size: int = IMAGE_SIZE
                    ) -> np.ndarray:
    """Bilinear resize of the boxed region back to out_size x out_size.

    Uses corner-aligned sampling so a full-frame box reproduces the image
    exactly.  Output is clamped to [0, 1].
    """
    region = img[:, box.y0 : box.y1, box.x0 : box.x1]
    _, h, w = region.shape

    def grid(n_src):
        if n_src == 1:
            return np.zeros(out_size), np.zeros(out_size, dtype=int), np.zeros(out_size, dtype=int)
        pos = np.arange(out_size) * (n_src - 1) / (out_size - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        return pos - lo, lo, hi

    fy, y_lo, y_hi = grid(h)
    fx, x_lo, x_hi = grid(w)
    tl = region[:, y_lo[:, None], x_lo[None, :]]
    tr = region[:, y_lo[:, None], x_hi[None, :]]
    bl = region[:, y_hi[:, None], x_lo[None, :]]
    br = region[:, y_hi[:, None], x_hi[None, :]]
    wy = fy[:, None]
    wx = fx[None, :]
    out = (tl * (1 - wy) * (1 - wx) + tr * (1 - wy) * wx
           + bl * wy * (1 - wx) + br * wy * wx)
    return np.clip(out, 0.0, 1.0)


def localize(img: np.ndarray, p: VisionParams,
             threshold_frac: float = SALIENCY_THRESHOLD_FRAC,
             margin_frac: float = BOX_MARGIN_FRAC) -> tuple[BoundingBox, bool]:
    """Saliency -> box for one image."""
    return extract_box(saliency_map(img, p), threshold_frac, margin_frac)


def average_scores(a: ClassScores, b: ClassScores) -> ClassScores:
    if a.num_classes != b.num_classes:
        raise ShapeError(f"score lengths differ: {a.num_classes} vs {b.num_classes}")
    return ClassScores((a.scores + b.scores) / 2.0)


def vision_predict(img: np.ndarray, p: VisionParams) -> ClassScores:
    """Average of the softmax outputs on the original image and its crop."""
    _, s_orig = image_forward(img, p)
    box, _ = localize(img, p)
    _, s_crop = image_forward(crop_and_resize(img, box), p)
    return average_scores(s_orig, s_crop)


# ---------------------------------------------------------------------------
# training


@dataclass
class VisionTrainConfig:
    learning_rate: float = 0.002
    minibatch: int = 40
    epochs: int = 30
    crop_epochs: int = 0  # fine-tuning epochs on originals + localized crops
    crop_refresh: int = 5  # recompute the crops every this many crop epochs
    seed: int = 0
    # step decay: multiply the learning rate by lr_decay_factor at this epoch
    # (counted over epochs + crop_epochs)
    lr_decay_at: Optional[int] = None
    lr_decay_factor: float = 0.2
    # box extraction used for the fine-tuning crops
    saliency_threshold: float = SALIENCY_THRESHOLD_FRAC
    box_margin: float = BOX_MARGIN_FRAC
    # random horizontal flips during training (birds face either way)
    augment_flip: bool = True
    # bounds softmax confidence so the scores stay useful for late fusion
    label_smoothing: float = 0.1


def localize_crops(images: np.ndarray, p: VisionParams, batch_size: int = 40,
                   threshold_frac: float = SALIENCY_THRESHOLD_FRAC,
                   margin_frac: float = BOX_MARGIN_FRAC
                   ) -> tuple[np.ndarray, list[BoundingBox]]:
    """Saliency boxes and resized crops for a stack of images."""
    crops = np.empty_like(images)
    boxes: list[BoundingBox] = []
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        for i, sal in enumerate(saliency_maps(chunk, p)):
            box, _ = extract_box(sal, threshold_frac, margin_frac)
            boxes.append(box)
            crops[start + i] = crop_and_resize(chunk[i], box)
    return crops, boxes


def _sgd_epochs(images, labels, params, state, epochs, minibatch, rng, log,
                epoch_offset, config):
    n = images.shape[0]
    for epoch in range(epochs):
        if config.lr_decay_at is not None and epoch_offset + epoch == config.lr_decay_at:
            state = replace(state,
                            learning_rate=state.learning_rate * config.lr_decay_factor)
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, minibatch):
            sel = order[start : start + minibatch]
            batch = images[sel]
            if config.augment_flip:
                flips = rng.random(len(sel)) < 0.5
                batch = batch.copy()
                batch[flips] = batch[flips, :, :, ::-1]
            vp = VisionParams.from_dict(params)
            _, logits, cache = vision_forward(batch, vp)
            loss, dlogits = T.softmax_cross_entropy_batch(
                logits, labels[sel], config.label_smoothing)
            grads, _ = vision_backward(None, dlogits, cache)
            params, state = T.rmsprop_step(params, grads, state)
            total_loss += loss * len(sel)
            correct += int((logits.argmax(axis=1) == labels[sel]).sum())
        log.append({"epoch": float(epoch_offset + epoch),
                    "loss": total_loss / n, "acc": correct / n})
    return params, state


def train_vision(images: np.ndarray, labels: np.ndarray, num_classes: int,
                 config: VisionTrainConfig
                 ) -> tuple[VisionParams, list[dict[str, float]]]:
    """Cross-entropy training of the vision stream.

    First trains on original images, then (when ``crop_epochs`` > 0)
    fine-tunes on the union of originals and their saliency-localized
    crops so the crop pass of :func:`vision_predict` sees in-distribution
    inputs.
    """
    rng = np.random.default_rng(config.seed)
    params = init_vision_params(rng, num_classes).to_dict()
    state = T.RmspropState(learning_rate=config.learning_rate)
    log: list[dict[str, float]] = []
    params, state = _sgd_epochs(images, labels, params, state, config.epochs,
                                config.minibatch, rng, log, 0, config)
    done = 0
    both_labels = np.concatenate([labels, labels])
    while done < config.crop_epochs:
        # re-localize with the current model so the crop distribution the
        # network trains on tracks the crops it will see at prediction time
        crops, _ = localize_crops(images, VisionParams.from_dict(params),
                                  threshold_frac=config.saliency_threshold,
                                  margin_frac=config.box_margin)
        both = np.concatenate([images, crops])
        chunk = min(max(1, config.crop_refresh), config.crop_epochs - done)
        params, state = _sgd_epochs(both, both_labels, params, state, chunk,
                                    config.minibatch, rng, log,
                                    config.epochs + done, config)
        done += chunk
    return VisionParams.from_dict(params), log
