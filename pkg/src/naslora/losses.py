"""Segmentation and classification losses with greedy query matching.

The mask branch predicts M query masks; ground-truth regions (one binary mask
per class present in the label map) claim queries greedily by highest soft
IoU. Matched pairs feed BCE + Dice; every query feeds cross-entropy against
its class or the trailing no-object index. The total is
lambda_seg * (BCE + Dice) + lambda_cls * CE.
"""
from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_const,
    clamp,
    div,
    gather_lastdim,
    log,
    log_softmax_lastdim,
    mean_all,
    mul,
    reshape,
    scale,
    sigmoid,
    sub,
    sum_all,
    take,
    tensor,
)
from .errors import ShapeError, ValueCheckError

BCE_CLAMP = 1e-7
DICE_EPS = 1e-6


def bce_loss(pred_prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    y = target if isinstance(target, Tensor) else tensor(target)
    if pred_prob.shape != y.shape:
        raise ShapeError(f"bce_loss: shapes {pred_prob.shape} and {y.shape} differ")
    p = clamp(pred_prob, BCE_CLAMP, 1.0 - BCE_CLAMP)
    one_minus_y = tensor(1.0 - y.data)
    ll = add(mul(y, log(p)), mul(one_minus_y, log(sub(tensor(np.ones(p.shape)), p))))
    return scale(mean_all(ll), -1.0)


def dice_loss(pred_prob: Tensor, target) -> Tensor:
    """1 - (2*sum(y*p) + eps) / (sum(y^2) + sum(p^2) + eps)."""
    y = target if isinstance(target, Tensor) else tensor(target)
    if pred_prob.shape != y.shape:
        raise ShapeError(f"dice_loss: shapes {pred_prob.shape} and {y.shape} differ")
    num = add_const(scale(sum_all(mul(pred_prob, y)), 2.0), DICE_EPS)
    den = add_const(add(sum_all(mul(pred_prob, pred_prob)), sum_all(mul(y, y))),
                    DICE_EPS)
    return sub(tensor(1.0), div(num, den))


def cls_loss(class_logits: Tensor, target_idx) -> Tensor:
    """Mean cross-entropy over queries; targets are logit-row indices."""
    idx = np.asarray(target_idx, dtype=np.intp)
    if idx.shape != class_logits.shape[:-1]:
        raise ShapeError(f"cls_loss: target shape {idx.shape} != "
                         f"{class_logits.shape[:-1]}")
    k1 = class_logits.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= k1):
        raise ValueCheckError(f"cls_loss: target outside 0..{k1 - 1}")
    picked = gather_lastdim(log_softmax_lastdim(class_logits), idx)
    return scale(mean_all(picked), -1.0)


def total_loss(bce: Tensor, dice: Tensor, cls: Tensor,
               lambda_seg: float = 1.0, lambda_cls: float = 2.0) -> Tensor:
    return add(scale(add(bce, dice), lambda_seg), scale(cls, lambda_cls))


def soft_iou(probs: np.ndarray, mask: np.ndarray) -> float:
    inter = float((probs * mask).sum())
    union = float(probs.sum() + mask.sum() - inter)
    return inter / union if union > 0 else 0.0


def match_queries(mask_probs: np.ndarray, labels: np.ndarray,
                  num_classes: int) -> list[list[tuple[int, int]]]:
    """Greedy assignment of ground-truth regions to queries.

    For each batch element, classes present in the label map (ascending order)
    each claim the unassigned query whose sigmoid mask has the highest soft
    IoU with the class region (ties to the lowest query index). Returns, per
    batch element, a list of (query_index, class) pairs.
    """
    b, m = mask_probs.shape[:2]
    out = []
    for i in range(b):
        assigned: list[tuple[int, int]] = []
        free = list(range(m))
        present = [c for c in range(1, num_classes + 1) if (labels[i] == c).any()]
        for c in present:
            if not free:
                break
            region = (labels[i] == c).astype(float)
            scores = [soft_iou(mask_probs[i, q], region) for q in free]
            q = free.pop(int(np.argmax(scores)))
            assigned.append((q, c))
        out.append(assigned)
    return out


def segmentation_loss(mask_logits: Tensor, labels: np.ndarray, num_classes: int):
    """Matched-pair BCE + Dice, and per-query class targets.

    Returns (bce, dice, target_idx) where target_idx is the (B, M) array of
    logit-row indices for cls_loss: class c maps to row c-1, unmatched
    queries map to the trailing no-object row.
    """
    b, m, s1, s2 = mask_logits.shape
    if labels.shape != (b, s1, s2):
        raise ShapeError(f"segmentation_loss: labels {labels.shape} do not match "
                         f"masks {mask_logits.shape}")
    probs = sigmoid(mask_logits)
    matches = match_queries(probs.data, labels, num_classes)

    target_idx = np.full((b, m), num_classes, dtype=np.intp)
    flat_ids, masks = [], []
    for i, assigned in enumerate(matches):
        for q, c in assigned:
            target_idx[i, q] = c - 1
            flat_ids.append(i * m + q)
            masks.append((labels[i] == c).astype(float))
    if not flat_ids:
        zero = tensor(0.0)
        return zero, zero, target_idx

    flat = reshape(probs, (b * m, s1, s2))
    chosen = take(flat, flat_ids, axis=0)
    stacked = np.stack(masks)
    bce = bce_loss(chosen, tensor(stacked))
    dice_terms = None
    for j in range(len(flat_ids)):
        d = dice_loss(take(chosen, [j], axis=0), tensor(stacked[j][None]))
        dice_terms = d if dice_terms is None else add(dice_terms, d)
    dice = scale(dice_terms, 1.0 / len(flat_ids))
    return bce, dice, target_idx
