"""Hybrid CE + soft-Dice loss, edge supervision, and the mean-Dice metric."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import DataError


def check_labels(labels, num_classes: int):
    labels = torch.as_tensor(labels)
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        where = tuple(int(i) for i in bad.nonzero()[0])
        value = int(labels[where])
        raise DataError(f"label {value} at voxel {where} outside [0, {num_classes})")
    return labels.long()


def cross_entropy(logits, labels):
    """Mean over pixels of ``-log softmax(logits)[true class]``."""
    labels = check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels)


def _dice_terms(probs, labels, cfg: LossConfig):
    k = probs.shape[1]
    onehot = F.one_hot(labels, k).movedim(-1, 1).to(probs.dtype)
    dims = (0,) + tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(dims)
    p_mass = probs.sum(dims)
    g_mass = onehot.sum(dims)
    dice = (2 * inter + cfg.smooth_eps) / (p_mass + g_mass + cfg.smooth_eps)
    # a class counts once it has ground truth or at least one voxel of predicted mass
    present = (g_mass > 0) | (p_mass >= 1.0)
    dice = torch.where(present, dice, torch.ones_like(dice))
    if not cfg.include_background_in_dice:
        dice = dice[1:]
    return dice


def soft_dice_from_probs(probs, labels, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    labels = check_labels(labels, probs.shape[1])
    return 1 - _dice_terms(probs, labels, cfg).mean()


def soft_dice_loss(logits, labels, cfg: LossConfig | None = None):
    """``1 - mean_c dice_c`` on softmax probabilities, summed over the whole batch.

    Background is skipped unless ``cfg.include_background_in_dice``; classes with
    neither ground truth nor a voxel's worth of predicted mass score 1.
    """
    return soft_dice_from_probs(torch.softmax(logits, dim=1), labels, cfg)


def edge_target_from_labels(labels, size=None):
    """Binary boundary map: 1 where any in-bounds 4-neighbour has another label.

    ``labels`` is ``(B, H, W)``; the result is ``(B, 1, H, W)`` float, max-pooled
    down to ``size`` when given.
    """
    lab = torch.as_tensor(labels)
    edge = torch.zeros(lab.shape, dtype=torch.bool, device=lab.device)
    dv = lab[..., 1:, :] != lab[..., :-1, :]
    dh = lab[..., :, 1:] != lab[..., :, :-1]
    edge[..., 1:, :] |= dv
    edge[..., :-1, :] |= dv
    edge[..., :, 1:] |= dh
    edge[..., :, :-1] |= dh
    edge = edge.unsqueeze(1).float()
    if size is not None and tuple(size) != tuple(edge.shape[-2:]):
        edge = F.adaptive_max_pool2d(edge, tuple(size))
    return edge


def binary_cross_entropy(p, target):
    """``F.binary_cross_entropy`` that returns NaN for non-finite inputs instead of raising."""
    finite = torch.isfinite(p)
    loss = F.binary_cross_entropy(torch.where(finite, p, torch.full_like(p, 0.5)), target)
    return loss if bool(finite.all()) else loss + float("nan")


def hybrid_loss(logits, labels, edge_map=None, edge_target=None, cfg: LossConfig | None = None):
    """``alpha * CE + beta * Dice (+ edge_weight * BCE)``; returns (total, components)."""
    cfg = cfg or LossConfig()
    if (edge_map is None) != (edge_target is None):
        raise ValueError("edge_map and edge_target must be given together")
    labels = check_labels(labels, logits.shape[1])
    ce = F.cross_entropy(logits, labels)
    dice = soft_dice_loss(logits, labels, cfg)
    total = cfg.alpha * ce + cfg.beta * dice
    components = {"ce": ce, "dice": dice}
    if edge_map is not None:
        target = torch.as_tensor(edge_target, dtype=edge_map.dtype, device=edge_map.device)
        if target.shape[-2:] != edge_map.shape[-2:]:
            target = F.adaptive_max_pool2d(target, edge_map.shape[-2:])
        edge = binary_cross_entropy(edge_map, target)
        components["edge"] = edge
        if cfg.edge_weight:
            total = total + cfg.edge_weight * edge
    components["total"] = total
    return total, components


@dataclass
class DiceReport:
    """Hard Dice per (subject, class) and its averages.

    ``per_class`` is NaN for classes never scored; ``grand_mean`` is the mean of
    the per-subject means.
    """

    subjects: list[str]
    dice: dict[str, dict[int, float]]
    per_class: np.ndarray
    per_subject_mean: np.ndarray
    grand_mean: float
    num_classes: int = 0
    extra: dict = field(default_factory=dict)

    def rows(self):
        for s in self.subjects:
            for c, d in sorted(self.dice[s].items()):
                yield s, c, d

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject", "class", "dice"])
            for s, c, d in self.rows():
                writer.writerow([s, c, repr(float(d))])

    def summary(self) -> dict:
        return {
            "grand_mean": float(self.grand_mean),
            "per_class": {str(c): (None if np.isnan(v) else float(v))
                          for c, v in enumerate(self.per_class)},
            "per_subject_mean": {s: float(v) for s, v in zip(self.subjects, self.per_subject_mean)},
            **self.extra,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def hard_dice_per_class(pred, gt, num_classes: int) -> dict[int, float]:
    """Dice for every class present in ``pred`` or ``gt`` (absent classes omitted)."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    p_count = np.bincount(pred, minlength=num_classes)
    g_count = np.bincount(gt, minlength=num_classes)
    inter = np.bincount(gt[gt == pred], minlength=num_classes)
    out = {}
    for c in range(num_classes):
        denom = p_count[c] + g_count[c]
        if denom:
            out[c] = 2.0 * inter[c] / denom
    return out


def mean_dice(pred_labels, gt_labels, num_classes: int, subjects=None,
              include_background: bool = False) -> DiceReport:
    """Mean hard Dice averaged over classes, then over subjects.

    ``pred_labels`` / ``gt_labels`` are a single label volume or a sequence of
    them (one per subject). Within a subject, classes absent from both volumes
    are skipped; a subject with nothing to score counts as 1.
    """
    if isinstance(pred_labels, (np.ndarray, torch.Tensor)):
        pred_labels, gt_labels = [pred_labels], [gt_labels]
    pred_labels, gt_labels = list(pred_labels), list(gt_labels)
    if len(pred_labels) != len(gt_labels):
        raise DataError(f"{len(pred_labels)} predictions for {len(gt_labels)} ground truths")
    subjects = list(subjects) if subjects is not None else [str(i) for i in range(len(gt_labels))]
    if len(subjects) != len(gt_labels):
        raise DataError("subject ids do not match the number of volumes")

    per_subject, table = [], {}
    sums = np.zeros(num_classes)
    counts = np.zeros(num_classes)
    for sid, pred, gt in zip(subjects, pred_labels, gt_labels):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"subject {sid}: prediction shape {pred.shape} != truth shape {gt.shape}")
        for name, arr in (("prediction", pred), ("truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
                raise DataError(f"subject {sid}: {name} labels outside [0, {num_classes})")
        scores = hard_dice_per_class(pred, gt, num_classes)
        if not include_background:
            scores.pop(0, None)
        table[sid] = scores
        for c, d in scores.items():
            sums[c] += d
            counts[c] += 1
        per_subject.append(float(np.mean(list(scores.values()))) if scores else 1.0)

    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    per_subject = np.asarray(per_subject)
    return DiceReport(subjects=subjects, dice=table, per_class=per_class,
                      per_subject_mean=per_subject, grand_mean=float(per_subject.mean()),
                      num_classes=num_classes)
