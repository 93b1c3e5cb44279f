"""Late fusion of the two streams, beta selection, evaluation and ablations.

The fused score of a class is the vision-stream probability plus beta times
the language-stream probability; only the argmax of the fused vector is
consumed, so it is left unnormalized.  Beta defaults to 3 and can be selected
on a validation split over a small grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ProtocolError, ShapeError
from .joint import ClassBank, classify_image_fv
from .vision import ClassScores

DEFAULT_BETA = 3.0
DEFAULT_BETA_GRID = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)


@dataclass(frozen=True)
class FusionConfig:
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ConfigError(f"beta must be finite and nonnegative, got {self.beta}")


def fuse_scores(vision: ClassScores, language: ClassScores,
                cfg: FusionConfig) -> np.ndarray:
    """Unnormalized fused class scores: vision + beta * language."""
    if vision.num_classes != language.num_classes:
        raise ShapeError(
            f"stream sizes differ: {vision.num_classes} vs {language.num_classes}")
    return vision.scores + cfg.beta * language.scores


def fused_prediction(vision: ClassScores, language: ClassScores,
                     cfg: FusionConfig) -> int:
    """Argmax of the fused scores; ties go to the smallest index."""
    return int(np.argmax(fuse_scores(vision, language, cfg)))


def _fused_accuracy(vision_scores: np.ndarray, language_scores: np.ndarray,
                    labels: np.ndarray, beta: float) -> float:
    fused = vision_scores + beta * language_scores
    return float((fused.argmax(axis=1) == labels).mean())


def select_beta(vision_scores: np.ndarray, language_scores: np.ndarray,
                labels: np.ndarray,
                grid: Sequence[float] = DEFAULT_BETA_GRID) -> float:
    """Beta maximizing fused accuracy on a validation split; ties to smallest.

    `vision_scores` and `language_scores` are (N, K) per-sample probability
    rows for the same N validation samples.
    """
    vision_scores = np.asarray(vision_scores, dtype=np.float64)
    language_scores = np.asarray(language_scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(grid) == 0:
        raise ConfigError("beta grid is empty")
    if vision_scores.shape[0] == 0:
        raise ConfigError("validation split is empty")
    if vision_scores.shape != language_scores.shape:
        raise ShapeError(
            f"score shapes differ: {vision_scores.shape} vs {language_scores.shape}")
    best_beta = None
    best_acc = -1.0
    for beta in sorted(float(b) for b in grid):
        FusionConfig(beta)  # validate
        acc = _fused_accuracy(vision_scores, language_scores, labels, beta)
        if acc > best_acc:
            best_acc = acc
            best_beta = beta
    return best_beta


@dataclass
class EvalReport:
    """Test-split accuracies of all stream variants plus the fused confusion."""

    accuracy_vision: float  # original + crop, averaged softmax
    accuracy_language: float
    accuracy_fused: float
    accuracy_original_only: float
    confusion: np.ndarray  # (K, K) fused counts: row true class, column prediction
    beta: float
    zero_shot_top1: Optional[float] = None

    def __post_init__(self):
        for name in ("accuracy_vision", "accuracy_language", "accuracy_fused",
                     "accuracy_original_only"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} out of range: {v}")
        self.confusion = np.asarray(self.confusion, dtype=np.int64)


def evaluate(orig_scores: np.ndarray, crop_scores: np.ndarray,
             language_scores: np.ndarray, labels: np.ndarray,
             cfg: FusionConfig) -> EvalReport:
    """Assemble the four-way stream comparison from per-sample score rows.

    All score arrays are (N, K) softmax rows over the same classes: the
    vision stream on the original images, the vision stream on the localized
    crops, and the language stream.
    """
    labels = np.asarray(labels)
    for name, arr in (("orig", orig_scores), ("crop", crop_scores),
                      ("language", language_scores)):
        if arr.shape != orig_scores.shape:
            raise ShapeError(f"{name} scores shape {arr.shape} != {orig_scores.shape}")
    if labels.shape[0] != orig_scores.shape[0]:
        raise ShapeError(
            f"{labels.shape[0]} labels for {orig_scores.shape[0]} samples")
    k = orig_scores.shape[1]
    vision_scores = (orig_scores + crop_scores) / 2.0
    fused = vision_scores + cfg.beta * language_scores
    pred_fused = fused.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred_fused), 1)
    return EvalReport(
        accuracy_vision=float((vision_scores.argmax(axis=1) == labels).mean()),
        accuracy_language=float((language_scores.argmax(axis=1) == labels).mean()),
        accuracy_fused=float((pred_fused == labels).mean()),
        accuracy_original_only=float((orig_scores.argmax(axis=1) == labels).mean()),
        confusion=confusion,
        beta=cfg.beta,
    )


def write_report(report: EvalReport, path: str) -> None:
    """One metric per line, `name=value`."""
    lines = [
        f"beta={report.beta:.6g}",
        f"accuracy_original_only={report.accuracy_original_only:.6f}",
        f"accuracy_vision={report.accuracy_vision:.6f}",
        f"accuracy_language={report.accuracy_language:.6f}",
        f"accuracy_fused={report.accuracy_fused:.6f}",
    ]
    if report.zero_shot_top1 is not None:
        lines.append(f"zero_shot_top1={report.zero_shot_top1:.6f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_confusion(report: EvalReport, path: str) -> None:
    """CSV: header true,pred_0..pred_{K-1}; one row per true class."""
    k = report.confusion.shape[0]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true"] + [f"pred_{j}" for j in range(k)])
        for i in range(k):
            writer.writerow([i] + report.confusion[i].tolist())


def ablate_localization(predictions: dict[str, tuple[Sequence[int], Sequence[int]]],
                        required: Sequence[str] = ("full", "crop")
                        ) -> dict[str, float]:
    """Language-stream accuracy per training condition.

    `predictions` maps a condition name (e.g. "full" for whole cluttered
    images, "crop" for localized crops) to (predicted labels, true labels).
    """
    missing = [name for name in required if name not in predictions]
    if missing:
        raise ConfigError(f"missing ablation variants: {missing}")
    table = {}
    for name, (pred, truth) in predictions.items():
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape or pred.size == 0:
            raise ShapeError(f"variant {name}: bad prediction shape {pred.shape}")
        table[name] = float((pred == truth).mean())
    return table


def zero_shot_eval(v_feats: np.ndarray, labels: Sequence[int], bank: ClassBank,
                   seen_labels: Sequence[int]) -> float:
    """Top-1 accuracy on unseen classes via text-bank compatibility.

    `bank` holds class means built only from unseen-class descriptions;
    `seen_labels` are the training classes, checked for disjointness before
    any classification happens.
    """
    unseen = set(bank.labels.tolist())
    overlap = unseen & set(int(y) for y in seen_labels)
    if overlap:
        raise ProtocolError(f"unseen classes overlap training classes: {sorted(overlap)}")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("zero-shot split is empty")
    preds = np.array([classify_image_fv(v, bank) for v in np.asarray(v_feats)])
    return float((preds == labels).mean())
