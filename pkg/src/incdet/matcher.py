"""Set-prediction matching: the pairwise matching cost between targets and
prediction slots, an exact bipartite solver, and a brute-force oracle.

The matching cost combines a focal-style classification term (positive minus
negative focal cost at the target class, weight 2) with the box term
(5 * l1 + 2 * (1 - GIoU)). Costs are computed without gradients; the solver
is a shortest-augmenting-path implementation that breaks ties toward the
lowest prediction index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Box, pairwise_giou
from .losses import FOCAL_ALPHA, FOCAL_GAMMA, W_CLS, W_GIOU, W_L1, focal_terms

BRUTE_FORCE_MAX_TARGETS = 8
BRUTE_FORCE_MAX_MAPS = 2_000_000


@dataclass(frozen=True)
class GroundTruthSet:
    """Real (non-padding) target objects: class labels and center-form boxes."""

    labels: torch.Tensor  # (n,) long
    boxes: torch.Tensor  # (n, 4) float, center form

    def __post_init__(self):
        if self.labels.ndim != 1 or self.boxes.ndim != 2 or self.boxes.shape[-1] != 4:
            raise ValueError("GroundTruthSet expects labels (n,) and boxes (n, 4)")
        if self.labels.shape[0] != self.boxes.shape[0]:
            raise ValueError("label / box count mismatch")
        if self.labels.numel() and self.labels.min() < 0:
            raise ValueError("negative class label")
        if self.boxes.numel() and not bool(((self.boxes >= 0) & (self.boxes <= 1)).all()):
            raise ValueError("box coordinates outside [0, 1]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def from_objects(cls, objects: list[tuple[int, Box]]) -> "GroundTruthSet":
        labels = torch.tensor([c for c, _ in objects], dtype=torch.long)
        boxes = (
            torch.stack([b.to_tensor(torch.float32) for _, b in objects])
            if objects
            else torch.zeros((0, 4))
        )
        return cls(labels, boxes)

    @classmethod
    def empty(cls) -> "GroundTruthSet":
        return cls(torch.zeros(0, dtype=torch.long), torch.zeros((0, 4)))


@dataclass(frozen=True)
class PredictionSet:
    """One image's M prediction slots: per-slot class logits and boxes."""

    logits: torch.Tensor  # (M, C)
    boxes: torch.Tensor  # (M, 4) center form

    def __post_init__(self):
        if self.logits.ndim != 2 or self.boxes.ndim != 2 or self.boxes.shape[-1] != 4:
            raise ValueError("PredictionSet expects logits (M, C) and boxes (M, 4)")
        if self.logits.shape[0] != self.boxes.shape[0]:
            raise ValueError("logit / box slot count mismatch")

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class Assignment:
    """Injective map target index -> prediction slot, plus its total cost."""

    target_to_slot: tuple[int, ...]
    total_cost: float

    def __post_init__(self):
        if len(set(self.target_to_slot)) != len(self.target_to_slot):
            raise ValueError("assignment is not injective")

    def pairs(self) -> list[tuple[int, int]]:
        return list(enumerate(self.target_to_slot))


def match_cost(
    target: tuple[int, Box | torch.Tensor],
    pred: tuple[torch.Tensor, Box | torch.Tensor],
) -> float:
    """Matching cost of one (real target, prediction slot) pair."""
    label, tgt_box = target
    logits, pred_box = pred
    tgt_t = tgt_box.to_tensor(torch.float64) if isinstance(tgt_box, Box) else tgt_box.double()
    pred_t = pred_box.to_tensor(torch.float64) if isinstance(pred_box, Box) else pred_box.double()
    gts = GroundTruthSet(torch.tensor([label]), tgt_t.unsqueeze(0).float())
    mat = cost_matrix(gts, logits.double().unsqueeze(0), pred_t.unsqueeze(0))
    return float(mat[0, 0])


def cost_matrix(
    targets: GroundTruthSet,
    logits: torch.Tensor,
    boxes: torch.Tensor,
    w_cls: float = W_CLS,
    w_l1: float = W_L1,
    w_giou: float = W_GIOU,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> np.ndarray:
    """(n_targets, M) cost matrix of Hungarian matching costs.

    Rows cover real targets only; padding never enters the matching.
    """
    with torch.no_grad():
        pos, neg = focal_terms(logits, alpha, gamma)
        cls_cost = (pos - neg)[:, targets.labels].T  # (n, M)
        tgt_boxes = targets.boxes.to(boxes.dtype)
        l1 = torch.cdist(tgt_boxes, boxes, p=1)
        giou = pairwise_giou(tgt_boxes, boxes)
        cost = w_cls * cls_cost + w_l1 * l1 + w_giou * (1 - giou)
    return cost.cpu().numpy().astype(np.float64)


def _assignment_total(cost: np.ndarray, slots: np.ndarray) -> float:
    return float(cost[np.arange(len(slots)), slots].sum())


def hungarian_solve(cost: np.ndarray) -> Assignment:
    """Exact minimum-cost assignment of n targets to M >= n slots.

    Shortest-augmenting-path method with row/column potentials; argmin scans
    resolve ties to the lowest slot index, so the result is deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more targets ({n}) than prediction slots ({m})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if n == 0:
        return Assignment((), 0.0)

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    matched_row = np.zeros(m + 1, dtype=np.int64)  # column -> row (1-based, 0 free)
    path = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        matched_row[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = matched_row[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            improve = free & (cur < minv[1:])
            minv[1:][improve] = cur[improve]
            path[1:][improve] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[matched_row[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if matched_row[j0] == 0:
                break
        while j0 != 0:
            j1 = path[j0]
            matched_row[j0] = matched_row[j1]
            j0 = j1

    slots = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if matched_row[j] != 0:
            slots[matched_row[j] - 1] = j - 1
    return Assignment(tuple(int(s) for s in slots), _assignment_total(cost, slots))


def brute_force_solve(cost: np.ndarray) -> Assignment:
    """Exhaustive minimum over all injective target -> slot maps (test oracle)."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more targets ({n}) than prediction slots ({m})")
    if n == 0:
        return Assignment((), 0.0)
    if n > BRUTE_FORCE_MAX_TARGETS:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX_TARGETS} targets, got {n}")
    n_maps = math.perm(m, n)
    if n_maps > BRUTE_FORCE_MAX_MAPS:
        raise ValueError(f"{n_maps} injective maps exceed the brute-force guard")

    rows = np.arange(n)
    best_slots: tuple[int, ...] | None = None
    best_total = np.inf
    for perm in itertools.permutations(range(m), n):
        total = float(cost[rows, list(perm)].sum())
        if total < best_total:
            best_total = total
            best_slots = perm
    assert best_slots is not None
    return Assignment(tuple(best_slots), _assignment_total(cost, np.array(best_slots)))


def match(targets: GroundTruthSet, logits: torch.Tensor, boxes: torch.Tensor) -> Assignment:
    """Cost matrix + Hungarian solve in one step; empty targets allowed."""
    if len(targets) == 0:
        return Assignment((), 0.0)
    return hungarian_solve(cost_matrix(targets, logits, boxes))
