"""Command-line interface.

Subcommands: gen-data, train-vision, train-joint, localize, eval, ablate,
zero-shot, gradcheck.  Exit codes: 0 success, 1 usage error, 2 data or model
error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import fusion as F
from . import joint as J
from . import pipeline as P
from . import tensor as T
from . import textenc as TE
from . import vision as V
from .errors import ConfigError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="twostream",
                     description="Two-stream fine-grained classifier.")
    sub = parser.add_subparsers(dest="command")

    def add(name, help_text, boxes=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        if boxes:
            p.add_argument("--threshold", type=float,
                           default=P.PipelineConfig.saliency_threshold,
                           help="saliency threshold as a fraction of the peak")
            p.add_argument("--margin", type=float,
                           default=P.PipelineConfig.box_margin,
                           help="bounding-box margin as a fraction of the frame")
        return p

    p = add("gen-data", "generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--clutter", type=float, default=0.5)

    p = add("train-vision", "train the vision stream", boxes=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="vision checkpoint path")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--crop-epochs", type=int, default=15)

    p = add("train-joint", "train the joint embedding on localized crops", boxes=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vision", required=True, help="vision checkpoint path")
    p.add_argument("--out", required=True, help="joint checkpoint path")
    p.add_argument("--epochs", type=int, default=60)

    p = add("localize", "write saliency bounding boxes for every image", boxes=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vision", required=True)
    p.add_argument("--out", required=True, help="output CSV path")

    p = add("eval", "evaluate both streams and their fusion on the test split", boxes=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vision", required=True)
    p.add_argument("--joint", required=True)
    p.add_argument("--beta", type=float, default=None,
                   help="fusion weight; omitted -> selected on the val split")
    p.add_argument("--out", required=True, help="output directory")

    p = add("ablate", "train +crop and full-image language variants and compare", boxes=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vision", required=True)
    p.add_argument("--epochs", type=int, default=60)

    p = add("zero-shot", "evaluate held-out classes via text banks", boxes=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vision", required=True)
    p.add_argument("--joint", required=True)
    p.add_argument("--classes", type=int, required=True,
                   help="number of seen (training) classes; higher labels are unseen")

    add("gradcheck", "run the finite-difference gradient suite")
    return parser


def _load_vision(path: str) -> V.VisionParams:
    return V.VisionParams.from_dict(D.load_checkpoint(Path(path)))


def _save_joint(path: str, model: J.JointModel) -> None:
    entries = {f"text.{k}": v for k, v in model.text.to_dict().items()}
    entries.update({f"vision.{k}": v for k, v in model.vision.to_dict().items()})
    D.save_checkpoint(Path(path), entries)


def _load_joint(path: str) -> J.JointModel:
    entries = D.load_checkpoint(Path(path))
    text = TE.TextEncoderParams.from_dict(
        {k[5:]: v for k, v in entries.items() if k.startswith("text.")})
    vis = V.VisionParams.from_dict(
        {k[7:]: v for k, v in entries.items() if k.startswith("vision.")})
    return J.JointModel(vision=vis, text=text)


def _splits(data_dir: str):
    records = D.load_manifest(Path(data_dir) / "manifest.csv")
    alphabet = TE.build_alphabet()
    return records, alphabet


def _cmd_gen_data(args) -> int:
    spec = D.SynthSpec(args.classes, args.per_class, args.clutter, args.seed)
    records = D.generate_synthetic(spec, Path(args.out))
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def _cmd_train_vision(args) -> int:
    records, alphabet = _splits(args.data)
    train = P.load_split(records, "train", alphabet)
    num_classes = int(max(r.label for r in records)) + 1
    total = args.epochs + args.crop_epochs
    cfg = V.VisionTrainConfig(epochs=args.epochs, crop_epochs=args.crop_epochs,
                              lr_decay_at=max(1, (4 * total) // 5),
                              saliency_threshold=args.threshold,
                              box_margin=args.margin, seed=args.seed)
    params, log = V.train_vision(train.images, train.labels, num_classes, cfg)
    for row in log:
        print(f"{int(row['epoch'])},{row['loss']:.6f},{row['acc']:.6f}")
    D.save_checkpoint(Path(args.out), params.to_dict())
    print(f"saved vision checkpoint to {args.out}")
    return 0


def _cmd_train_joint(args) -> int:
    records, alphabet = _splits(args.data)
    train = P.load_split(records, "train", alphabet)
    vision = _load_vision(args.vision)
    crops, _ = V.localize_crops(train.images, vision,
                                threshold_frac=args.threshold,
                                margin_frac=args.margin)
    cfg = J.JointTrainConfig(epochs=args.epochs, seed=args.seed,
                             learning_rate=0.002,
                             lr_decay_at=max(1, (2 * args.epochs) // 3))
    model, log = J.train_joint(crops, train.texts, train.labels, vision, cfg)
    print("epoch,loss,fv_acc,ft_acc")
    for row in log:
        print(f"{int(row['epoch'])},{row['loss']:.6f},"
              f"{row['fv_acc']:.6f},{row['ft_acc']:.6f}")
    _save_joint(args.out, model)
    print(f"saved joint checkpoint to {args.out}")
    return 0


def _cmd_localize(args) -> int:
    records, _ = _splits(args.data)
    vision = _load_vision(args.vision)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "x0", "y0", "x1", "y1", "flag"])
        for r in records:
            img = D.load_ppm(r.image_path)
            box, fallback = V.localize(img, vision, args.threshold, args.margin)
            writer.writerow([r.image_id, box.x0, box.y0, box.x1, box.y1,
                             int(fallback)])
    print(f"wrote boxes for {len(records)} images to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    records, alphabet = _splits(args.data)
    train = P.load_split(records, "train", alphabet)
    val = P.load_split(records, "val", alphabet)
    test = P.load_split(records, "test", alphabet)
    vision = _load_vision(args.vision)
    model = _load_joint(args.joint)

    bank = P._class_text_bank(train.texts, train.labels, model.text)
    test_crops, _ = V.localize_crops(test.images, vision,
                                     threshold_frac=args.threshold,
                                     margin_frac=args.margin)
    orig = P._vision_softmax(test.images, vision)
    crop = P._vision_softmax(test_crops, vision)
    lang = P._language_scores(V.vision_features(test_crops, model.vision), bank)

    if args.beta is None:
        val_crops, _ = V.localize_crops(val.images, vision,
                                        threshold_frac=args.threshold,
                                        margin_frac=args.margin)
        val_vis = (P._vision_softmax(val.images, vision)
                   + P._vision_softmax(val_crops, vision)) / 2.0
        val_lang = P._language_scores(
            V.vision_features(val_crops, model.vision), bank)
        beta = F.select_beta(val_vis, val_lang, val.labels)
    else:
        beta = args.beta
    report = F.evaluate(orig, crop, lang, test.labels, F.FusionConfig(beta))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    F.write_report(report, str(out / "report.txt"))
    F.write_confusion(report, str(out / "confusion.csv"))
    print(f"beta={beta:g} accuracy_fused={report.accuracy_fused:.4f} "
          f"accuracy_vision={report.accuracy_vision:.4f} "
          f"accuracy_language={report.accuracy_language:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    records, alphabet = _splits(args.data)
    train = P.load_split(records, "train", alphabet)
    test = P.load_split(records, "test", alphabet)
    vision = _load_vision(args.vision)
    cfg = J.JointTrainConfig(epochs=args.epochs, seed=args.seed,
                             learning_rate=0.002,
                             lr_decay_at=max(1, (2 * args.epochs) // 3))
    crops, _ = V.localize_crops(train.images, vision,
                                threshold_frac=args.threshold,
                                margin_frac=args.margin)
    model_crop, _ = J.train_joint(crops, train.texts, train.labels, vision, cfg)
    import dataclasses
    model_full, _ = J.train_joint(train.images, train.texts, train.labels,
                                  vision, dataclasses.replace(cfg, use_crop=False))
    test_crops, _ = V.localize_crops(test.images, vision,
                                     threshold_frac=args.threshold,
                                     margin_frac=args.margin)
    bank_c = P._class_text_bank(train.texts, train.labels, model_crop.text)
    bank_f = P._class_text_bank(train.texts, train.labels, model_full.text)
    pred_c = [J.classify_image_fv(v, bank_c)
              for v in V.vision_features(test_crops, model_crop.vision)]
    pred_f = [J.classify_image_fv(v, bank_f)
              for v in V.vision_features(test.images, model_full.vision)]
    table = F.ablate_localization({"crop": (pred_c, test.labels),
                                   "full": (pred_f, test.labels)})
    for name in sorted(table):
        print(f"{name}={table[name]:.4f}")
    return 0


def _cmd_zero_shot(args) -> int:
    records, alphabet = _splits(args.data)
    vision = _load_vision(args.vision)
    model = _load_joint(args.joint)
    unseen = [r for r in records if r.label >= args.classes]
    if not unseen:
        raise ConfigError(f"no classes with label >= {args.classes} in dataset")
    fit = [r for r in unseen if r.split in ("train", "val")]
    test = P.load_split(unseen, "test", alphabet)
    texts = [[TE.encode_chars(s, alphabet) for s in r.descriptions] for r in fit]
    bank = P._class_text_bank(texts, np.array([r.label for r in fit]), model.text)
    crops, _ = V.localize_crops(test.images, vision,
                                threshold_frac=args.threshold,
                                margin_frac=args.margin)
    feats = V.vision_features(crops, model.vision)
    top1 = F.zero_shot_eval(feats, test.labels, bank,
                            seen_labels=range(args.classes))
    print(f"zero_shot_top1={top1:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = P.gradcheck_suite()
    worst = 0.0
    for name, seed, err in results:
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name},{seed},{err:.3e},{status}")
        worst = max(worst, err)
    print(f"worst={worst:.3e}")
    return 0 if worst < 1e-4 else 2


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-vision": _cmd_train_vision,
    "train-joint": _cmd_train_joint,
    "localize": _cmd_localize,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "zero-shot": _cmd_zero_shot,
    "gradcheck": _cmd_gradcheck,
}


def cli_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    entry()
