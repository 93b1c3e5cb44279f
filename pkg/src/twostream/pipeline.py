"""End-to-end orchestration: dataset, both streams, fusion and reports.

One `run_pipeline` call generates (or reuses) a synthetic dataset, trains the
vision stream, localizes crops, trains the joint embedding on them, selects
beta on the validation split, and evaluates everything on the test split.
Optional extras: a full-image joint variant for the localization ablation and
held-out classes for zero-shot evaluation.  The CLI and the acceptance tests
both drive this module so their numbers agree.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import fusion as F
from . import joint as J
from . import tensor as T
from . import textenc as TE
from . import vision as V
from .errors import ConfigError


@dataclass
class PipelineConfig:
    classes: int = 20
    per_class: int = 30
    clutter: float = 0.5
    seed: int = 0
    vision_epochs: int = 22
    vision_crop_epochs: int = 26
    vision_lr: float = 0.002
    vision_decay_at: Optional[int] = 40
    # box extraction, calibrated for small birds among saturated clutter: a
    # low threshold keeps the whole bird in one component and a tight margin
    # keeps the crop close to the ground-truth box
    saliency_threshold: float = 0.10
    box_margin: float = 0.02
    joint_epochs: int = 60
    joint_lr: float = 0.002
    joint_decay_at: Optional[int] = 40
    beta: Optional[float] = None  # None -> select on the validation split
    zero_shot_classes: int = 0  # extra generated classes held out of training
    ablate_full_variant: bool = False  # also train the no-crop joint variant

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least two classes, got {self.classes}")
        if not 0.0 <= self.clutter <= 1.0:
            raise ConfigError(f"clutter must be in [0,1], got {self.clutter}")


@dataclass
class SplitData:
    records: list[D.SampleRecord]
    images: np.ndarray
    labels: np.ndarray
    texts: list[list[TE.EncodedText]]


@dataclass
class PipelineResult:
    report: F.EvalReport
    beta: float
    mean_iou: float
    vision: V.VisionParams
    model: J.JointModel
    joint_log: list[dict[str, float]]
    vision_log: list[dict[str, float]]
    ablation: Optional[dict[str, float]] = None
    zero_shot_top1: Optional[float] = None
    timings: dict[str, float] = field(default_factory=dict)


def load_split(records: Sequence[D.SampleRecord], split: str,
               alphabet: TE.Alphabet) -> SplitData:
    recs = [r for r in records if r.split == split]
    return SplitData(
        records=recs,
        images=D.load_images(recs),
        labels=np.array([r.label for r in recs]),
        texts=[[TE.encode_chars(s, alphabet) for s in r.descriptions] for r in recs],
    )


def ensure_dataset(data_dir: Path, cfg: PipelineConfig) -> list[D.SampleRecord]:
    """Generate the dataset unless its manifest already exists."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        spec = D.SynthSpec(cfg.classes + cfg.zero_shot_classes, cfg.per_class,
                           cfg.clutter, cfg.seed)
        D.generate_synthetic(spec, data_dir)
    return D.load_manifest(manifest)


def _class_text_bank(texts: list[list[TE.EncodedText]], labels: np.ndarray,
                     tp: TE.TextEncoderParams) -> J.ClassBank:
    flat = [e for per in texts for e in per]
    flat_labels = np.repeat(labels, [len(per) for per in texts])
    return J.ClassBank.from_embeddings(flat_labels, TE.embed_texts(flat, tp))


def _language_scores(v_feats: np.ndarray, bank: J.ClassBank) -> np.ndarray:
    return T.softmax(np.asarray(v_feats) @ bank.means.T)


def _vision_softmax(images: np.ndarray, p: V.VisionParams,
                    batch_size: int = 64) -> np.ndarray:
    out = np.empty((images.shape[0], p.num_classes))
    for start in range(0, images.shape[0], batch_size):
        _, logits, _ = V.vision_forward(images[start : start + batch_size], p)
        out[start : start + logits.shape[0]] = T.softmax(logits)
    return out


def run_pipeline(data_dir: Path, cfg: PipelineConfig,
                 out_dir: Optional[Path] = None) -> PipelineResult:
    timings: dict[str, float] = {}
    t0 = time.time()
    records = ensure_dataset(data_dir, cfg)
    alphabet = TE.build_alphabet()
    seen_records = [r for r in records if r.label < cfg.classes]
    unseen_records = [r for r in records if r.label >= cfg.classes]
    train = load_split(seen_records, "train", alphabet)
    val = load_split(seen_records, "val", alphabet)
    test = load_split(seen_records, "test", alphabet)
    timings["data"] = time.time() - t0

    # vision stream: originals, then fine-tuning on saliency crops
    t0 = time.time()
    vcfg = V.VisionTrainConfig(learning_rate=cfg.vision_lr,
                               epochs=cfg.vision_epochs,
                               crop_epochs=cfg.vision_crop_epochs,
                               lr_decay_at=cfg.vision_decay_at,
                               saliency_threshold=cfg.saliency_threshold,
                               box_margin=cfg.box_margin,
                               seed=cfg.seed)
    vision, vision_log = V.train_vision(train.images, train.labels,
                                        cfg.classes, vcfg)
    timings["vision"] = time.time() - t0

    t0 = time.time()

    def crops_of(images):
        return V.localize_crops(images, vision,
                                threshold_frac=cfg.saliency_threshold,
                                margin_frac=cfg.box_margin)

    train_crops, _ = crops_of(train.images)
    val_crops, _ = crops_of(val.images)
    test_crops, test_boxes = crops_of(test.images)
    ious = [b.iou(r.gt_box) for b, r in zip(test_boxes, test.records)]
    timings["localize"] = time.time() - t0

    # language stream: joint embedding trained on the crops
    t0 = time.time()
    jcfg = J.JointTrainConfig(learning_rate=cfg.joint_lr,
                              epochs=cfg.joint_epochs, seed=cfg.seed,
                              lr_decay_at=cfg.joint_decay_at, use_crop=True)
    model, joint_log = J.train_joint(train_crops, train.texts, train.labels,
                                     vision, jcfg)
    timings["joint"] = time.time() - t0

    t0 = time.time()
    bank = _class_text_bank(train.texts, train.labels, model.text)
    test_orig_scores = _vision_softmax(test.images, vision)
    test_crop_scores = _vision_softmax(test_crops, vision)
    test_lang_scores = _language_scores(
        V.vision_features(test_crops, model.vision), bank)

    if cfg.beta is None:
        val_vis = (_vision_softmax(val.images, vision)
                   + _vision_softmax(val_crops, vision)) / 2.0
        val_lang = _language_scores(
            V.vision_features(val_crops, model.vision), bank)
        beta = F.select_beta(val_vis, val_lang, val.labels)
    else:
        beta = cfg.beta
    report = F.evaluate(test_orig_scores, test_crop_scores, test_lang_scores,
                        test.labels, F.FusionConfig(beta))
    timings["evaluate"] = time.time() - t0

    # optional ablation: same joint recipe on the full cluttered images
    ablation = None
    if cfg.ablate_full_variant:
        t0 = time.time()
        model_full, _ = J.train_joint(train.images, train.texts, train.labels,
                                      vision,
                                      dataclasses.replace(jcfg, use_crop=False))
        bank_full = _class_text_bank(train.texts, train.labels, model_full.text)
        feats_full = V.vision_features(test.images, model_full.vision)
        pred_full = [J.classify_image_fv(v, bank_full) for v in feats_full]
        feats_crop = V.vision_features(test_crops, model.vision)
        pred_crop = [J.classify_image_fv(v, bank) for v in feats_crop]
        ablation = F.ablate_localization({
            "full": (pred_full, test.labels),
            "crop": (pred_crop, test.labels),
        })
        timings["ablation"] = time.time() - t0

    # optional zero-shot on the held-out classes
    zero_shot_top1 = None
    if unseen_records:
        t0 = time.time()
        zs_fit = [r for r in unseen_records if r.split in ("train", "val")]
        zs_test = load_split(unseen_records, "test", alphabet)
        zs_texts = [[TE.encode_chars(s, alphabet) for s in r.descriptions]
                    for r in zs_fit]
        zs_bank = _class_text_bank(zs_texts, np.array([r.label for r in zs_fit]),
                                   model.text)
        zs_crops, _ = crops_of(zs_test.images)
        zs_feats = V.vision_features(zs_crops, model.vision)
        zero_shot_top1 = F.zero_shot_eval(zs_feats, zs_test.labels, zs_bank,
                                          seen_labels=range(cfg.classes))
        report.zero_shot_top1 = zero_shot_top1
        timings["zero_shot"] = time.time() - t0

    result = PipelineResult(
        report=report, beta=beta, mean_iou=float(np.mean(ious)),
        vision=vision, model=model, joint_log=joint_log,
        vision_log=vision_log, ablation=ablation,
        zero_shot_top1=zero_shot_top1, timings=timings,
    )
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def write_outputs(result: PipelineResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    F.write_report(result.report, str(out_dir / "report.txt"))
    F.write_confusion(result.report, str(out_dir / "confusion.csv"))
    with open(out_dir / "metrics.txt", "w") as f:
        f.write(f"mean_iou={result.mean_iou:.6f}\n")
        if result.ablation is not None:
            for name in sorted(result.ablation):
                f.write(f"ablation_{name}={result.ablation[name]:.6f}\n")
    with open(out_dir / "train_log.csv", "w") as f:
        f.write("epoch,loss,fv_acc,ft_acc\n")
        for row in result.joint_log:
            f.write(f"{int(row['epoch'])},{row['loss']:.6f},"
                    f"{row['fv_acc']:.6f},{row['ft_acc']:.6f}\n")


# ---------------------------------------------------------------------------
# gradient-check suite (shared by `twostream gradcheck` and the tests)


def gradcheck_suite(seeds: Sequence[int] = (1, 2, 3, 4, 5)
                    ) -> list[tuple[str, int, float]]:
    """Finite-difference checks for every layer and both full losses.

    Returns (name, seed, max relative error) triples.  Seeds index random
    draw points; hinge/argmax losses are only differentiable away from their
    kinks, so the draws below stay at generic points.
    """
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)

        def weighted(y_and_back, param_grads):
            return float(y_and_back[0]), param_grads

        # linear
        x = rng.normal(size=(3, 5)); w = rng.normal(size=(4, 5))
        b = rng.normal(size=4); r = rng.normal(size=(3, 4))

        def f_linear(p):
            y, cache = T.linear_forward(p["x"], p["w"], p["b"])
            dx, dw, db = T.linear_backward(r, cache)
            return float((y * r).sum()), {"x": dx, "w": dw, "b": db}

        results.append(("linear", seed, T.grad_check(
            f_linear, {"x": x, "w": w, "b": b})))

        # temporal conv
        xt = rng.normal(size=(2, 4, 12)); wt = rng.normal(size=(3, 4, 5))
        bt = rng.normal(size=3); rt = rng.normal(size=(2, 3, 8))

        def f_tconv(p):
            y, cache = T.temporal_conv_forward(p["x"], p["w"], p["b"])
            dx, dw, db = T.temporal_conv_backward(rt, cache)
            return float((y * rt).sum()), {"x": dx, "w": dw, "b": db}

        results.append(("temporal_conv", seed, T.grad_check(
            f_tconv, {"x": xt, "w": wt, "b": bt})))

        # temporal max pool
        xp = rng.normal(size=(2, 3, 12)); rp = rng.normal(size=(2, 3, 4))

        def f_tpool(p):
            y, cache = T.temporal_maxpool_forward(p["x"], 3, 3)
            return float((y * rp).sum()), {"x": T.temporal_maxpool_backward(rp, cache)}

        results.append(("temporal_maxpool", seed, T.grad_check(f_tpool, {"x": xp})))

        # 2-d conv
        x2 = rng.normal(size=(2, 3, 8, 8)); w2 = rng.normal(size=(4, 3, 3, 3))
        b2 = rng.normal(size=4); r2 = rng.normal(size=(2, 4, 6, 6))

        def f_conv2(p):
            y, cache = T.conv2d_forward(p["x"], p["w"], p["b"])
            dx, dw, db = T.conv2d_backward(r2, cache)
            return float((y * r2).sum()), {"x": dx, "w": dw, "b": db}

        results.append(("conv2d", seed, T.grad_check(
            f_conv2, {"x": x2, "w": w2, "b": b2})))

        # 2-d max pool
        xq = rng.normal(size=(2, 3, 8, 8)); rq = rng.normal(size=(2, 3, 4, 4))

        def f_pool2(p):
            y, cache = T.maxpool2d_forward(p["x"], 2, 2)
            return float((y * rq).sum()), {"x": T.maxpool2d_backward(rq, cache)}

        results.append(("maxpool2d", seed, T.grad_check(f_pool2, {"x": xq})))

        # recurrent cell (full BPTT)
        xs = rng.normal(size=(2, 5, 3)); h0 = np.zeros((2, 4))
        wx = rng.normal(size=(4, 3)) * 0.5; wh = rng.normal(size=(4, 4)) * 0.5
        br = rng.normal(size=4) * 0.5; rr = rng.normal(size=(2, 5, 4))

        def f_rnn(p):
            hs, cache = T.rnn_forward(p["x"], h0, p["wx"], p["wh"], p["b"])
            dxs, _, dwx, dwh, db = T.rnn_backward(rr, cache)
            return float((hs * rr).sum()), {"x": dxs, "wx": dwx, "wh": dwh, "b": db}

        results.append(("rnn", seed, T.grad_check(
            f_rnn, {"x": xs, "wx": wx, "wh": wh, "b": br})))

        # mean over time
        hm = rng.normal(size=(2, 6, 4)); rm = rng.normal(size=(2, 4))

        def f_mot(p):
            y, cache = T.mean_over_time_forward(p["h"])
            return float((y * rm).sum()), {"h": T.mean_over_time_backward(rm, cache)}

        results.append(("mean_over_time", seed, T.grad_check(f_mot, {"h": hm})))

        # softmax cross-entropy
        lg = rng.normal(size=(3, 5)); lb = np.array([seed % 5, 0, 3])

        def f_xent(p):
            loss, dlogits = T.softmax_cross_entropy_batch(p["logits"], lb)
            return loss, {"logits": dlogits}

        results.append(("softmax_xent", seed, T.grad_check(f_xent, {"logits": lg})))

        # full vision loss (small images)
        imgs = rng.random(size=(2, 3, 20, 20))
        vlabels = np.array([seed % 4, (seed + 1) % 4])
        vp0 = V.init_vision_params(rng, 4)

        def f_vision(p):
            vp = V.VisionParams.from_dict(p)
            _, logits, cache = V.vision_forward(imgs, vp)
            loss, dlogits = T.softmax_cross_entropy_batch(logits, vlabels)
            grads, _ = V.vision_backward(None, dlogits, cache)
            return loss, grads

        results.append(("vision_xent", seed, T.grad_check(
            f_vision, vp0.to_dict(), rng=rng, max_coords_per_param=4)))

        # full joint loss through both encoders (small text config)
        tp0 = TE.init_text_params(rng, alphabet_size=12, n_filters=6,
                                  hidden=5, embed_dim=4)
        vfeats = rng.normal(size=(4, 4))
        jlabels = np.array([0, 0, 1, 1])
        idx = rng.integers(0, 12, size=(4, 30))
        onehots = np.zeros((4, 12, 30))
        for i in range(4):
            onehots[i, idx[i], np.arange(30)] = 1.0
        vw = rng.normal(size=(4, 4)); vb = rng.normal(size=4)

        def f_joint(p):
            tp = TE.TextEncoderParams.from_dict(
                {k[2:]: v for k, v in p.items() if k.startswith("t.")})
            _, t_embs, t_cache = TE.encoder_forward(onehots, tp)
            v_out, v_cache = T.linear_forward(vfeats, p["v.w"], p["v.b"])
            loss, dv, dt = J.dssje_minibatch_loss(v_out, t_embs, jlabels)
            grads = {f"t.{k}": g for k, g in
                     TE.encoder_backward(dt, t_cache, tp).items()}
            _, grads["v.w"], grads["v.b"] = T.linear_backward(dv, v_cache)
            return loss, grads

        jparams = {f"t.{k}": v for k, v in tp0.to_dict().items()}
        jparams["v.w"] = vw
        jparams["v.b"] = vb
        results.append(("joint_dssje", seed, T.grad_check(
            f_joint, jparams, rng=rng, max_coords_per_param=4)))
    return results
