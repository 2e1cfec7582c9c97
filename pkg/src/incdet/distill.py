"""Teacher-side pseudo ground-truth selection and assembly of the two
knowledge-distillation losses used during novel fine-tuning.

The frozen base model supplies pseudo ground truths of the base classes
(confident detections away from novel objects) for classification
distillation, and its projection features for masked feature imitation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import center_to_corner, pairwise_iou
from .losses import kl_class_distill, masked_feature_distill
from .matcher import GroundTruthSet, cost_matrix, hungarian_solve
from .model import ModelOutput
from .proposals import DEFAULT_OVERLAP_THRESHOLD


@dataclass
class PseudoBaseGT:
    """Teacher detections kept as base-class pseudo ground truths."""

    labels: torch.Tensor  # (p,) argmax base class per kept query
    boxes: torch.Tensor  # (p, 4) teacher boxes, center form
    logits: torch.Tensor  # (p, C) teacher logits of the kept queries

    def __len__(self) -> int:
        return self.labels.shape[0]


def select_pseudo_base_gt(
    teacher_out: ModelOutput,
    novel_gt: GroundTruthSet,
    base_class_ids: tuple[int, ...],
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> PseudoBaseGT:
    """Keep teacher queries with max base-class probability > 0.5 whose box
    does not overlap any novel ground truth box beyond the threshold.

    `teacher_out` must be a single-image output (logits (M, C))."""
    logits, boxes = teacher_out.logits, teacher_out.boxes
    probs = logits.sigmoid()[:, list(base_class_ids)]
    best_prob, best_idx = probs.max(dim=-1)
    keep = best_prob > 0.5
    if keep.any() and len(novel_gt):
        ious = pairwise_iou(boxes, novel_gt.boxes)
        keep &= ious.max(dim=-1).values <= overlap_threshold
    idx = keep.nonzero(as_tuple=True)[0]
    base_ids = torch.tensor(base_class_ids, dtype=torch.long)
    return PseudoBaseGT(
        labels=base_ids[best_idx[idx]],
        boxes=boxes[idx].detach(),
        logits=logits[idx].detach(),
    )


def build_feature_mask(novel_gt: GroundTruthSet, grid: tuple[int, int]) -> torch.Tensor:
    """(h, w) binary mask: 1 where the cell center falls inside any novel
    ground truth box, 0 elsewhere."""
    h, w = grid
    mask = torch.zeros((h, w))
    if not len(novel_gt):
        return mask
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    corners = center_to_corner(novel_gt.boxes)  # (n, 4)
    for x1, y1, x2, y2 in corners.tolist():
        mask[(cx >= x1) & (cx <= x2) & (cy >= y1) & (cy <= y2)] = 1.0
    return mask


def kd_losses(
    student_out: ModelOutput,
    teacher_out: ModelOutput,
    novel_gt: GroundTruthSet,
    base_class_ids: tuple[int, ...],
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(feature KD loss, classification KD loss) for one image.

    Feature distillation imitates the teacher projection features outside
    novel boxes. Classification distillation matches the teacher's pseudo
    base ground truths to student queries with the standard matching cost
    and averages the per-pair KL terms; it is 0 when nothing is selected.
    """
    mask = build_feature_mask(novel_gt, tuple(student_out.features.shape[-2:]))
    feat_kd = masked_feature_distill(student_out.features, teacher_out.features, mask)

    pseudo = select_pseudo_base_gt(teacher_out, novel_gt, base_class_ids, overlap_threshold)
    if len(pseudo) == 0:
        return feat_kd, torch.zeros(())
    pseudo_targets = GroundTruthSet(pseudo.labels, pseudo.boxes.clamp(0.0, 1.0))
    assignment = hungarian_solve(
        cost_matrix(pseudo_targets, student_out.logits, student_out.boxes)
    )
    base_idx = torch.tensor(base_class_ids, dtype=torch.long)
    terms = [
        kl_class_distill(student_out.logits[slot], pseudo.logits[t], base_idx)
        for t, slot in assignment.pairs()
    ]
    return feat_kd, torch.stack(terms).mean()
