"""COCO-style average precision over base, novel and all classes.

AP per class is the 101-point interpolated area under the precision-recall
curve, averaged over IoU thresholds 0.50:0.95 (step 0.05); AP50 uses the
0.50 threshold alone. One detection per query slot: score is the max sigmoid
probability over the real classes, the reserved proposal class is excluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .data import Dataset
from .geometry import pairwise_iou
from .matcher import GroundTruthSet
from .model import Detector

IOU_THRESHOLDS = tuple(np.arange(0.5, 0.96, 0.05).round(2))
RECALL_POINTS = 101


@dataclass
class Detection:
    image_id: int
    label: int
    score: float
    box: torch.Tensor  # (4,) center form


@dataclass
class EvalResult:
    per_class: dict[int, dict[str, float]]  # class id -> {"ap": .., "ap50": ..}
    base: dict[str, float]
    novel: dict[str, float]
    all: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "base": self.base,
            "novel": self.novel,
            "all": self.all,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def match_detections(
    det_boxes: torch.Tensor, gt_boxes: torch.Tensor, iou_thresh: float
) -> list[bool]:
    """Greedy TP/FP flags for one image and one class.

    `det_boxes` must already be sorted by descending score. Each detection
    matches the unmatched ground truth of highest IoU >= threshold.
    """
    n_gt = gt_boxes.shape[0]
    flags: list[bool] = []
    taken = np.zeros(n_gt, dtype=bool)
    if n_gt:
        ious = pairwise_iou(det_boxes, gt_boxes).numpy() if det_boxes.shape[0] else np.zeros((0, n_gt))
    for d in range(det_boxes.shape[0]):
        if n_gt == 0:
            flags.append(False)
            continue
        masked = np.where(taken, -1.0, ious[d])
        best = int(masked.argmax())
        if masked[best] >= iou_thresh:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: list[bool] | np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if n_gt == 0:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # monotone-decreasing envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, RECALL_POINTS)
    idx = np.searchsorted(recall, points, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def detections_from_output(
    logits: torch.Tensor, boxes: torch.Tensor, real_class_ids: tuple[int, ...], image_id: int
) -> list[Detection]:
    """One detection per query: argmax sigmoid score over the real classes."""
    probs = logits.sigmoid()[:, list(real_class_ids)]
    best = probs.argmax(dim=-1)
    out = []
    for q in range(logits.shape[0]):
        cls = real_class_ids[int(best[q])]
        out.append(
            Detection(image_id=image_id, label=cls, score=float(probs[q, best[q]]), box=boxes[q])
        )
    return out


def _class_ap(
    detections: list[Detection], gts: dict[int, torch.Tensor], iou_thresh: float
) -> float:
    """AP of one class at one threshold; `gts` maps image id -> (n, 4) boxes."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    per_image: dict[int, list[int]] = {}
    for i in order:
        per_image.setdefault(detections[i].image_id, []).append(i)
    flag_of: dict[int, bool] = {}
    for image_id, det_idx in per_image.items():
        det_boxes = torch.stack([detections[i].box for i in det_idx])
        gt_boxes = gts.get(image_id, torch.zeros((0, 4)))
        for i, f in zip(det_idx, match_detections(det_boxes, gt_boxes, iou_thresh)):
            flag_of[i] = f
    flags = [flag_of[i] for i in order]
    n_gt = int(sum(b.shape[0] for b in gts.values()))
    return average_precision(flags, n_gt)


def evaluate_detections(
    detections: list[Detection],
    ground_truths: dict[int, GroundTruthSet],
    class_ids: tuple[int, ...],
) -> dict[int, dict[str, float]]:
    """Per-class AP / AP50 from raw detections and per-image ground truths."""
    per_class: dict[int, dict[str, float]] = {}
    for cls in class_ids:
        dets = [d for d in detections if d.label == cls]
        gts = {
            image_id: g.boxes[g.labels == cls]
            for image_id, g in ground_truths.items()
            if bool((g.labels == cls).any())
        }
        aps = [_class_ap(dets, gts, t) for t in IOU_THRESHOLDS]
        per_class[cls] = {"ap": float(np.mean(aps)), "ap50": aps[0], "n_gt": float(sum(b.shape[0] for b in gts.values()))}
    return per_class


def _aggregate(per_class: dict[int, dict[str, float]], ids: tuple[int, ...]) -> dict[str, float]:
    """Mean AP over the classes that actually have ground truth."""
    present = [c for c in ids if per_class.get(c, {}).get("n_gt", 0) > 0]
    if not present:
        return {"ap": 0.0, "ap50": 0.0}
    return {
        "ap": float(np.mean([per_class[c]["ap"] for c in present])),
        "ap50": float(np.mean([per_class[c]["ap50"] for c in present])),
    }


def evaluate(model: Detector, dataset: Dataset, batch_size: int = 16) -> EvalResult:
    """Run the detector on every sample and score COCO-style AP."""
    cfg = model.config
    model.eval()
    detections: list[Detection] = []
    gts: dict[int, GroundTruthSet] = {}
    with torch.no_grad():
        for start in range(0, len(dataset.samples), batch_size):
            chunk = dataset.samples[start : start + batch_size]
            images = torch.from_numpy(
                np.stack([s.image for s in chunk]).astype(np.float32) / 255.0
            ).permute(0, 3, 1, 2)
            out = model(images)
            for i, s in enumerate(chunk):
                gts[s.image_id] = s.gts
                detections.extend(
                    detections_from_output(out.logits[i], out.boxes[i], cfg.real_class_ids, s.image_id)
                )
    split = dataset.split
    per_class = evaluate_detections(detections, gts, split.all_classes)
    return EvalResult(
        per_class=per_class,
        base=_aggregate(per_class, split.base_classes),
        novel=_aggregate(per_class, split.novel_classes),
        all=_aggregate(per_class, split.all_classes),
    )
