"""Language stream: image/text compatibility, per-class banks, the structured
max-margin surrogate loss and the joint training loop.

The compatibility between an image and a description is the inner product of
their embeddings.  A class is scored by the expected compatibility over its
descriptions, which (by linearity) equals the compatibility with the class's
mean embedding, so banks cache per-class means.  Training pushes each
sample's matching class expectation above every mismatched one by a margin,
symmetrically in both directions (image against text classes, text against
image classes).
"""

from __future__ import annotations

import math
import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from . import textenc as TE
from .errors import BankIncompleteError, DegenerateBatchError, ShapeError
from .textenc import EncodedText, TextEncoderParams, TextEmbedding
from .vision import ClassScores, VisionParams


def compatibility(v_feat: np.ndarray, t_emb) -> float:
    """Inner product of an image feature and a text embedding."""
    t_vec = t_emb.vector if isinstance(t_emb, TextEmbedding) else np.asarray(t_emb)
    v_feat = np.asarray(v_feat)
    if v_feat.shape != t_vec.shape:
        raise ShapeError(f"compatibility dims differ: {v_feat.shape} vs {t_vec.shape}")
    return float(v_feat @ t_vec)


# ---------------------------------------------------------------------------
# class banks


@dataclass
class ClassBank:
    """Per-class embedding sets with cached means; labels kept sorted."""

    labels: np.ndarray  # (K,) sorted ints
    members: dict[int, np.ndarray]  # label -> (n_y, d)
    means: np.ndarray  # (K, d), row i is the mean for labels[i]

    @classmethod
    def from_embeddings(cls, labels: np.ndarray, embeddings: np.ndarray) -> "ClassBank":
        labels = np.asarray(labels)
        uniq = np.unique(labels)
        members = {int(y): embeddings[labels == y] for y in uniq}
        means = np.stack([members[int(y)].mean(axis=0) for y in uniq])
        return cls(labels=uniq, members=members, means=means)

    def require(self, expected_labels: Sequence[int]) -> None:
        missing = sorted(set(int(y) for y in expected_labels) - set(self.labels.tolist()))
        if missing:
            raise BankIncompleteError(f"bank missing classes {missing}")

    def position(self, label: int) -> int:
        pos = int(np.searchsorted(self.labels, label))
        if pos >= len(self.labels) or self.labels[pos] != label:
            raise BankIncompleteError(f"bank missing class {label}")
        return pos


def language_class_scores(v_feat: np.ndarray, bank: ClassBank) -> ClassScores:
    """Softmax over per-class expected compatibilities, in bank label order."""
    raw = bank.means @ np.asarray(v_feat)
    return ClassScores(T.softmax(raw))


def classify_image_fv(v_feat: np.ndarray, bank: ClassBank) -> int:
    """Most compatible class for an image feature; ties to the smallest label."""
    raw = bank.means @ np.asarray(v_feat)
    return int(bank.labels[np.argmax(raw)])


def classify_text_ft(t_emb, image_bank: ClassBank) -> int:
    """Most compatible class for a text embedding against per-class image means."""
    t_vec = t_emb.vector if isinstance(t_emb, TextEmbedding) else np.asarray(t_emb)
    raw = image_bank.means @ t_vec
    return int(image_bank.labels[np.argmax(raw)])


def empirical_risk(pred_v: Sequence[int], pred_t: Sequence[int],
                   truth: Sequence[int]) -> float:
    """Mean 0-1 risk summed over the two classifiers; in [0, 2]."""
    pred_v = np.asarray(pred_v)
    pred_t = np.asarray(pred_t)
    truth = np.asarray(truth)
    if not (len(pred_v) == len(pred_t) == len(truth)) or len(truth) == 0:
        raise ShapeError(
            f"length mismatch: {len(pred_v)}, {len(pred_t)}, {len(truth)}")
    return float((pred_v != truth).mean() + (pred_t != truth).mean())


# ---------------------------------------------------------------------------
# structured max-margin surrogate loss


def dssje_minibatch_loss(v_feats: np.ndarray, t_embs: np.ndarray,
                         labels: np.ndarray, margin: float = 1.0
                         ) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric structured hinge over within-batch class means.

    Returns (loss, d_loss/d_v_feats, d_loss/d_t_embs).  Requires at least two
    distinct classes in the batch.
    """
    v_feats = np.asarray(v_feats, dtype=np.float64)
    t_embs = np.asarray(t_embs, dtype=np.float64)
    labels = np.asarray(labels)
    bsz = v_feats.shape[0]
    classes, inv = np.unique(labels, return_inverse=True)
    n_cls = len(classes)
    if n_cls < 2:
        raise DegenerateBatchError("batch must contain at least two classes")
    counts = np.bincount(inv, minlength=n_cls).astype(np.float64)
    d = v_feats.shape[1]
    t_means = np.zeros((n_cls, d))
    np.add.at(t_means, inv, t_embs)
    t_means /= counts[:, None]
    v_means = np.zeros((n_cls, d))
    np.add.at(v_means, inv, v_feats)
    v_means /= counts[:, None]

    delta = margin * (inv[:, None] != np.arange(n_cls)[None, :])
    rows = np.arange(bsz)

    s_vt = v_feats @ t_means.T  # (B, C)
    term_v = delta + s_vt - s_vt[rows, inv][:, None]
    y_v = term_v.argmax(axis=1)
    s_tv = t_embs @ v_means.T
    term_t = delta + s_tv - s_tv[rows, inv][:, None]
    y_t = term_t.argmax(axis=1)
    loss = float((term_v[rows, y_v] + term_t[rows, y_t]).mean())

    dv = np.zeros_like(v_feats)
    dt = np.zeros_like(t_embs)
    dt_means = np.zeros_like(t_means)
    dv_means = np.zeros_like(v_means)

    act_v = y_v != inv
    dv[act_v] += (t_means[y_v[act_v]] - t_means[inv[act_v]]) / bsz
    np.add.at(dt_means, y_v[act_v], v_feats[act_v] / bsz)
    np.add.at(dt_means, inv[act_v], -v_feats[act_v] / bsz)

    act_t = y_t != inv
    dt[act_t] += (v_means[y_t[act_t]] - v_means[inv[act_t]]) / bsz
    np.add.at(dv_means, y_t[act_t], t_embs[act_t] / bsz)
    np.add.at(dv_means, inv[act_t], -t_embs[act_t] / bsz)

    dt += dt_means[inv] / counts[inv][:, None]
    dv += dv_means[inv] / counts[inv][:, None]
    return loss, dv, dt


# ---------------------------------------------------------------------------
# joint model and training


@dataclass
class JointModel:
    vision: VisionParams
    text: TextEncoderParams
    use_crop: bool = True


@dataclass
class JointTrainConfig:
    learning_rate: float = 0.0007
    minibatch: int = 40
    epochs: int = 30
    margin: float = 1.0
    seed: int = 0
    use_crop: bool = True
    unfreeze_image_encoder: bool = False
    # step decay: multiply the learning rate by lr_decay_factor at this epoch
    lr_decay_at: Optional[int] = None
    lr_decay_factor: float = 0.2


def _balanced_batches(rng: np.random.Generator, labels: np.ndarray,
                      minibatch: int, n_batches: int) -> list[np.ndarray]:
    """Class-balanced sampling: each batch covers min(K, minibatch//2) classes."""
    classes = np.unique(labels)
    by_class = {int(y): np.nonzero(labels == y)[0] for y in classes}
    c_batch = min(len(classes), max(2, minibatch // 2))
    per_class = math.ceil(minibatch / c_batch)
    batches = []
    for _ in range(n_batches):
        chosen = rng.choice(classes, size=c_batch, replace=False)
        idx = []
        for y in chosen:
            pool = by_class[int(y)]
            take = rng.choice(pool, size=per_class, replace=len(pool) < per_class)
            idx.extend(take.tolist())
        batches.append(np.array(idx[:minibatch]))
    return batches


def train_joint(images: np.ndarray, texts: list[list[EncodedText]],
                labels: np.ndarray, vision_init: VisionParams,
                config: JointTrainConfig
                ) -> tuple[JointModel, list[dict[str, float]]]:
    """Train the joint embedding with the structured surrogate loss.

    `images` are the image-stream inputs (crops when config.use_crop; the
    caller prepares them), `texts` holds the encoded descriptions per sample.
    By default the conv backbone stays fixed and only the image projection
    head and the text encoder are updated.
    """
    from . import vision as V

    rng = np.random.default_rng(config.seed)
    labels = np.asarray(labels)
    n = images.shape[0]
    text_params = TE.init_text_params(rng)
    vp_dict = {k: v.copy() for k, v in vision_init.to_dict().items()}

    params = {f"text.{k}": v for k, v in text_params.to_dict().items()}
    params["img.proj_w"] = vp_dict["proj_w"]
    params["img.proj_b"] = vp_dict["proj_b"]
    if config.unfreeze_image_encoder:
        for k in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b"):
            params[f"img.{k}"] = vp_dict[k]

    def current_vision() -> VisionParams:
        d = dict(vp_dict)
        d["proj_w"] = params["img.proj_w"]
        d["proj_b"] = params["img.proj_b"]
        if config.unfreeze_image_encoder:
            for k in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b"):
                d[k] = params[f"img.{k}"]
        return VisionParams.from_dict(d)

    def current_text() -> TextEncoderParams:
        return TextEncoderParams.from_dict(
            {k[5:]: v for k, v in params.items() if k.startswith("text.")})

    gaps: Optional[np.ndarray] = None
    if not config.unfreeze_image_encoder:
        # backbone fixed: precompute pooled conv features once
        gaps = _backbone_gap(images, vision_init)

    state = T.RmspropState(learning_rate=config.learning_rate)
    n_batches = max(1, n // config.minibatch)
    log: list[dict[str, float]] = []

    for epoch in range(config.epochs):
        if config.lr_decay_at is not None and epoch == config.lr_decay_at:
            state = dataclasses.replace(
                state, learning_rate=state.learning_rate * config.lr_decay_factor)
        batches = _balanced_batches(rng, labels, config.minibatch, n_batches)
        total = 0.0
        for sel in batches:
            tp = current_text()
            chosen = [texts[i][rng.integers(len(texts[i]))] for i in sel]
            onehots = TE.stack_onehots(chosen)
            _, t_embs, t_cache = TE.encoder_forward(onehots, tp)
            if gaps is not None:
                v_feats, proj_cache = T.linear_forward(
                    gaps[sel], params["img.proj_w"], params["img.proj_b"])
                v_cache = None
            else:
                vp = current_vision()
                v_feats, _, v_cache = V.vision_forward(images[sel], vp)
            loss, dv, dt = dssje_minibatch_loss(v_feats, t_embs, labels[sel],
                                                config.margin)
            grads = {f"text.{k}": g for k, g in
                     TE.encoder_backward(dt, t_cache, tp).items()}
            if gaps is not None:
                _, dpw, dpb = T.linear_backward(dv, proj_cache)
                grads["img.proj_w"] = dpw
                grads["img.proj_b"] = dpb
            else:
                vgrads, _ = V.vision_backward(dv, None, v_cache)
                for k in ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                          "conv3_w", "conv3_b", "proj_w", "proj_b"):
                    grads[f"img.{k}"] = vgrads[k]
            params, state = T.rmsprop_step(params, grads, state)
            total += loss
        fv_acc, ft_acc = _epoch_accuracy(images, gaps, texts, labels, rng,
                                         current_vision(), current_text())
        log.append({"epoch": float(epoch), "loss": total / len(batches),
                    "fv_acc": fv_acc, "ft_acc": ft_acc})

    model = JointModel(vision=current_vision(), text=current_text(),
                       use_crop=config.use_crop)
    return model, log


def _backbone_gap(images: np.ndarray, p: VisionParams, batch_size: int = 64
                  ) -> np.ndarray:
    """Pooled conv features (pre-projection) for a fixed backbone."""
    from . import vision as V

    out = np.empty((images.shape[0], p.proj_w.shape[1]))
    for start in range(0, images.shape[0], batch_size):
        feat, _, cache = V.vision_forward(images[start : start + batch_size], p)
        projc = cache[9]
        out[start : start + feat.shape[0]] = projc[0]  # GAP input to the projection
    return out


def _epoch_accuracy(images, gaps, texts, labels, rng, vp, tp
                    ) -> tuple[float, float]:
    """Train-set f_v / f_t accuracy from one sampled description per image."""
    from . import vision as V

    if gaps is not None:
        v_feats = gaps @ vp.proj_w.T + vp.proj_b
    else:
        v_feats = V.vision_features(images, vp)
    chosen = [texts[i][rng.integers(len(texts[i]))] for i in range(len(texts))]
    t_embs = TE.embed_texts(chosen, tp)
    t_bank = ClassBank.from_embeddings(labels, t_embs)
    v_bank = ClassBank.from_embeddings(labels, v_feats)
    fv = np.array([classify_image_fv(v, t_bank) for v in v_feats])
    ft = np.array([classify_text_ft(t, v_bank) for t in t_embs])
    return float((fv == labels).mean()), float((ft == labels).mean())
