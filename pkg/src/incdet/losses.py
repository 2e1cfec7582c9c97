"""Differentiable loss terms: sigmoid focal classification, box regression
(l1 + generalized IoU), masked feature distillation, and classification KL
distillation.

Teacher-side quantities (base feature maps, base logits) are detached, so
gradients flow only into the student inputs. Everything accepts float32 or
float64 tensors; gradient tests run at float64.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .geometry import box_giou

NO_OBJECT = -1

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
W_L1 = 5.0
W_GIOU = 2.0
W_CLS = 2.0


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def focal_terms(
    logits: torch.Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA
) -> tuple[torch.Tensor, torch.Tensor]:
    """Positive and negative binary focal terms, elementwise over logits.

    positive: alpha * (1 - p)^gamma * (-log p)
    negative: (1 - alpha) * p^gamma * (-log(1 - p))

    Uses softplus identities for the log terms, so large logits stay finite.
    """
    p = torch.sigmoid(logits)
    pos = alpha * (1 - p) ** gamma * F.softplus(-logits)
    neg = (1 - alpha) * p ** gamma * F.softplus(logits)
    return pos, neg


def sigmoid_focal_loss(
    logits: torch.Tensor,
    target_class: int,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> torch.Tensor:
    """Focal loss for one query: binary focal terms summed over all classes.

    `target_class` is the positive class index, or NO_OBJECT, in which case
    every class contributes its negative term.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha={alpha} outside (0, 1)")
    if gamma < 0:
        raise ValueError(f"gamma={gamma} must be >= 0")
    _check_finite(logits, "logits")
    n_classes = logits.shape[-1]
    if target_class != NO_OBJECT and not 0 <= target_class < n_classes:
        raise ValueError(f"target_class={target_class} outside head capacity {n_classes}")
    pos, neg = focal_terms(logits, alpha, gamma)
    if target_class == NO_OBJECT:
        return neg.sum()
    return pos[target_class] + neg.sum() - neg[target_class]


def focal_loss_matrix(
    logits: torch.Tensor,
    targets: torch.Tensor,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
    class_subset: torch.Tensor | None = None,
) -> torch.Tensor:
    """Vectorized focal loss over (M, C) logits with per-slot targets.

    `targets` holds the positive class index per slot, NO_OBJECT for none.
    `class_subset` restricts both positive and negative terms to the given
    class columns (used for the binary proposal-vs-background supervision).
    Returns the scalar sum over slots and selected classes.
    """
    _check_finite(logits, "logits")
    if class_subset is not None:
        logits = logits[:, class_subset]
        # remap targets into subset positions; non-members become NO_OBJECT
        remap = torch.full_like(targets, NO_OBJECT)
        for pos_idx, cls in enumerate(class_subset.tolist()):
            remap[targets == cls] = pos_idx
        targets = remap
    pos, neg = focal_terms(logits, alpha, gamma)
    onehot = torch.zeros_like(logits)
    matched = targets != NO_OBJECT
    if matched.any():
        onehot[matched, targets[matched]] = 1.0
    return (onehot * pos + (1 - onehot) * neg).sum()


def box_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    w_l1: float = W_L1,
    w_giou: float = W_GIOU,
) -> torch.Tensor:
    """w_l1 * |pred - target|_1 + w_giou * (1 - GIoU), center-form boxes.

    Works elementwise on (..., 4) tensors and returns the scalar sum;
    differentiable in `pred`.
    """
    if w_l1 < 0 or w_giou < 0:
        raise ValueError("box loss weights must be nonnegative")
    l1 = (pred - target).abs().sum()
    giou = box_giou(pred, target)
    return w_l1 * l1 + w_giou * (1 - giou).sum()


def masked_feature_distill(
    f_novel: torch.Tensor, f_base: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Squared-error feature imitation outside the masked-in cells.

    (1 / (2 * N)) * sum_{i,j,k} (1 - mask_ij) * (f_novel - f_base)^2 with
    N = sum_{i,j} (1 - mask_ij) counting spatial cells only. Returns 0 when
    every cell is masked in. `f_base` is treated as a constant.
    """
    if f_novel.shape != f_base.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_novel.shape)} vs {tuple(f_base.shape)}")
    if mask.shape != f_novel.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match feature grid {tuple(f_novel.shape[-2:])}")
    inv = (1 - mask).to(f_novel.dtype)
    n_out = inv.sum()
    if n_out.item() == 0:
        return torch.zeros((), dtype=f_novel.dtype)
    sq = (f_novel - f_base.detach()) ** 2
    return (inv * sq).sum() / (2 * n_out)


def kl_class_distill(
    logits_novel: torch.Tensor,
    logits_base: torch.Tensor,
    base_class_indices: torch.Tensor,
) -> torch.Tensor:
    """KL(q_base || q_novel) with both distributions softmaxed over the
    base-class logits only. Gradients flow into `logits_novel` alone.
    """
    idx = torch.as_tensor(base_class_indices, dtype=torch.long)
    if idx.numel() == 0:
        raise ValueError("base_class_indices is empty")
    log_q_novel = F.log_softmax(logits_novel[idx], dim=-1)
    log_q_base = F.log_softmax(logits_base.detach()[idx], dim=-1)
    q_base = log_q_base.exp()
    return (q_base * (log_q_base - log_q_novel)).sum()
