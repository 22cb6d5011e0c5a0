"""IoU, acc@tau and the top-5 patch retrieval protocol."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .boxes import BBox

TOP_K = 5


@dataclass(frozen=True)
class EvalReport:
    acc_at_25: float
    acc_at_50: float
    mean_iou: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return (
            f"samples   {self.n_samples}\n"
            f"acc@0.25  {100 * self.acc_at_25:.2f}\n"
            f"acc@0.5   {100 * self.acc_at_50:.2f}\n"
            f"mean IoU  {self.mean_iou:.4f}\n"
        )


def iou(a: BBox, b: BBox) -> float:
    if a.area <= 0 or b.area <= 0:
        return 0.0
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def accuracy_at(preds: Sequence[BBox], gts: Sequence[BBox], tau: float) -> float:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not gts:
        raise ValueError("no samples")
    return sum(iou(p, g) >= tau for p, g in zip(preds, gts)) / len(gts)


def report_from_boxes(preds: Sequence[BBox], gts: Sequence[BBox]) -> EvalReport:
    if not gts:
        raise ValueError("cannot evaluate an empty set")
    ious = [iou(p, g) for p, g in zip(preds, gts, strict=True)]
    return EvalReport(
        acc_at_25=accuracy_at(preds, gts, 0.25),
        acc_at_50=accuracy_at(preds, gts, 0.5),
        mean_iou=float(np.mean(ious)),
        n_samples=len(gts),
    )


def top_patches(scores: np.ndarray, k: int = TOP_K) -> list[tuple[int, int]]:
    """(row, col) of the k best patches; equal scores keep row-major order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"score grid must be 2-D, got shape {scores.shape}")
    if scores.size < k:
        raise ValueError(f"score grid has {scores.size} patches, need at least {k}")
    order = np.argsort(-scores.ravel(), kind="stable")[:k]
    return [divmod(int(i), scores.shape[1]) for i in order]


def patch_box(row: int, col: int, patch_size: int) -> BBox:
    return BBox((col + 0.5) * patch_size, (row + 0.5) * patch_size, patch_size, patch_size)


def patch_retrieval_protocol(scores: np.ndarray, gt: BBox, patch_size: int, tau: float) -> bool:
    """Hit iff any of the top-5 scoring patches overlaps ``gt`` with IoU >= tau."""
    return any(iou(patch_box(r, c, patch_size), gt) >= tau for r, c in top_patches(scores))


def evaluate(predict: Callable[[Sequence], Sequence[BBox]], samples: Sequence) -> EvalReport:
    """Score a predictor over samples that carry a ``gt_box``.

    ``predict`` maps a list of samples to one box per sample.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty manifest")
    preds = list(predict(samples))
    return report_from_boxes(preds, [s.gt_box for s in samples])


def oracle_predictor(samples: Sequence) -> list[BBox]:
    return [s.gt_box for s in samples]


def retrieval_scores(descriptor: np.ndarray, ref_features: np.ndarray, cells_per_patch: int) -> np.ndarray:
    """Cosine similarity between a query descriptor and average-pooled reference patches.

    ``ref_features`` is C x S_h x S_w; each patch covers ``cells_per_patch`` cells per side.
    """
    c, sh, sw = ref_features.shape
    if descriptor.shape != (c,):
        raise ValueError(f"descriptor length {descriptor.shape} does not match {c} reference channels")
    k = cells_per_patch
    if sh % k or sw % k:
        raise ValueError(f"{sh}x{sw} feature grid not divisible into {k}x{k}-cell patches")
    patches = ref_features.reshape(c, sh // k, k, sw // k, k).mean(axis=(2, 4))
    num = np.einsum("c,cij->ij", descriptor, patches)
    den = np.linalg.norm(descriptor) * np.linalg.norm(patches, axis=0) + 1e-12
    return num / den


def retrieval_report(score_grids: Sequence[np.ndarray], gts: Sequence[BBox], patch_size: int) -> EvalReport:
    """Protocol hit rates; ``mean_iou`` is the best IoU among each sample's top-5 patches."""
    if not gts:
        raise ValueError("cannot evaluate an empty set")
    hits25 = hits50 = 0
    best = []
    for scores, gt in zip(score_grids, gts, strict=True):
        hits25 += patch_retrieval_protocol(scores, gt, patch_size, 0.25)
        hits50 += patch_retrieval_protocol(scores, gt, patch_size, 0.5)
        best.append(max(iou(patch_box(r, c, patch_size), gt) for r, c in top_patches(scores)))
    n = len(gts)
    return EvalReport(hits25 / n, hits50 / n, float(np.mean(best)), n)
