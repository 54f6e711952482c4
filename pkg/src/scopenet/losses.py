"""Focal classification loss, tempered bin cross-entropy and IoU border loss.

The total is ``L_cls + [any positive] * (lambda_bin * L_bin + lambda_loc * L_loc)``
with ``L_cls`` normalised by the classification-positive count and the two
localization terms by the localization-positive count (each clamped at 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import TargetSet
from .autograd import Tensor, minimum
from .scope_head import bin_log_probs

IOU_FLOOR = 1e-6


class LossError(ValueError):
    pass


def focal_loss(
    logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0, normalizer: float | None = None
) -> Tensor:
    """Sigmoid focal loss summed over locations and classes.

    ``logits`` is (M, C); ``targets`` holds 0 for background or the 1-based
    class. Divided by ``normalizer`` or, by default, the positive count.
    """
    if logits.size == 0:
        raise LossError("focal_loss: empty feature map")
    targets = np.asarray(targets)
    m, c = logits.shape
    onehot = np.zeros((m, c))
    pos = np.flatnonzero(targets > 0)
    onehot[pos, targets[pos] - 1] = 1.0
    if normalizer is None:
        normalizer = max(1, pos.size)
    log_p = logits.log_sigmoid()
    log_q = (-logits).log_sigmoid()
    pos_term = alpha * (gamma * log_q).exp() * log_p
    neg_term = (1.0 - alpha) * (gamma * log_p).exp() * log_q
    return -(onehot * pos_term + (1.0 - onehot) * neg_term).sum() / float(normalizer)


def bin_loss(bin_raw: Tensor, bin_target: np.ndarray, uncertainty: bool = True, normalizer: float | None = None) -> Tensor:
    """Cross-entropy of the tempered bin softmax, averaged over the 4 directions.

    ``bin_raw`` is (P, 4, N + 1) with the log-temperature last; ``bin_target``
    is (P, 4) 0-based bin indices.
    """
    p = bin_raw.shape[0]
    if p == 0:
        return Tensor(0.0)
    if normalizer is None:
        normalizer = p
    logp = bin_log_probs(bin_raw, uncertainty)
    picked = logp[np.arange(p)[:, None], np.arange(4)[None, :], np.asarray(bin_target)]
    return -picked.mean(axis=1).sum() / float(normalizer)


def iou_from_distances(pred: Tensor, target: np.ndarray) -> Tensor:
    """IoU of two boxes sharing a reference point, from (P, 4) l/t/r/b distances."""
    tgt = Tensor(target)
    pred_area = (pred[:, 0] + pred[:, 2]) * (pred[:, 1] + pred[:, 3])
    tgt_area = (target[:, 0] + target[:, 2]) * (target[:, 1] + target[:, 3])
    inter_w = minimum(pred[:, 0], tgt[:, 0]) + minimum(pred[:, 2], tgt[:, 2])
    inter_h = minimum(pred[:, 1], tgt[:, 1]) + minimum(pred[:, 3], tgt[:, 3])
    inter = inter_w * inter_h
    return inter / (pred_area + tgt_area - inter)


def iou_loss(pred: Tensor, target: np.ndarray, mode: str = "log", normalizer: float | None = None) -> tuple[Tensor, int]:
    """``-ln IoU`` (or ``1 - IoU``) between decoded and target borders.

    Returns the loss and the number of samples whose IoU hit the 1e-6 floor.
    """
    p = pred.shape[0]
    if p == 0:
        return Tensor(0.0), 0
    if normalizer is None:
        normalizer = p
    target = np.asarray(target, dtype=np.float64)
    ious = iou_from_distances(pred, target)
    clamped = int((ious.data < IOU_FLOOR).sum())
    if mode == "log":
        per = -ious.clamp_min(IOU_FLOOR).log()
    elif mode == "linear":
        per = 1.0 - ious
    else:
        raise LossError(f"unknown IoU loss mode {mode!r}")
    return per.sum() / float(normalizer), clamped


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    bin: float
    loc: float
    num_cls_positive: int
    num_loc_positive: int
    iou_clamped: int = 0
    lambda_bin: float = 0.5
    lambda_loc: float = 1.0
    terms: dict[str, Tensor] = field(default_factory=dict, repr=False)

    @property
    def total_value(self) -> float:
        return self.total.item()

    def record(self, step: int) -> dict:
        return {
            "step": step,
            "L_cls": self.cls,
            "L_bin": self.bin,
            "L_loc": self.loc,
            "L_total": self.total_value,
            "num_cls_positive": self.num_cls_positive,
            "num_loc_positive": self.num_loc_positive,
            "iou_clamped": self.iou_clamped,
        }


def total_loss(
    l_cls: Tensor, l_bin: Tensor, l_loc: Tensor, has_positive: bool, lambda_bin: float = 0.5, lambda_loc: float = 1.0
) -> Tensor:
    if not has_positive:
        return l_cls
    return l_cls + lambda_bin * l_bin + lambda_loc * l_loc


@dataclass
class FlatTargets:
    """Targets aligned with the rows of a flattened head output.

    Rows are ordered level-major, then image, then row-major location.
    """

    cls_target: np.ndarray  # (M,)
    loc_rows: np.ndarray  # (P,) row indices of localization positives
    loc_level: np.ndarray  # (P,) level position (0-based) of each positive
    bin_target: np.ndarray  # (P, 4)
    border_target: np.ndarray  # (P, 4)

    @property
    def num_cls_positive(self) -> int:
        return int((self.cls_target > 0).sum())


def flatten_targets(per_image: list[list[TargetSet]]) -> FlatTargets:
    """Concatenate per-image, per-level targets into the flat row order."""
    n_levels = len(per_image[0])
    cls, rows, lvls, bins, borders = [], [], [], [], []
    offset = 0
    for li in range(n_levels):
        for targets in per_image:
            t = targets[li]
            cls.append(t.cls_target)
            pos = np.flatnonzero(t.loc_positive)
            rows.append(pos + offset)
            lvls.append(np.full(pos.size, li, dtype=np.int64))
            bins.append(t.bin_target[pos])
            borders.append(t.border_target[pos])
            offset += t.cls_target.size
    return FlatTargets(
        cls_target=np.concatenate(cls),
        loc_rows=np.concatenate(rows),
        loc_level=np.concatenate(lvls),
        bin_target=np.concatenate(bins).reshape(-1, 4),
        border_target=np.concatenate(borders).reshape(-1, 4),
    )


def decode_assigned(flat: Tensor, anchors: Tensor, targets: FlatTargets, num_classes: int, num_bins: int) -> Tensor:
    """Decoded (P, 4) borders of each positive using its ground-truth bins."""
    p = targets.loc_rows.size
    reg_start = num_classes + 4 * (num_bins + 1)
    dirs = np.arange(4)[None, :]
    cols = reg_start + dirs * num_bins + targets.bin_target
    t = flat[targets.loc_rows[:, None], cols]
    anchor_dirs = dirs if anchors.shape[1] == 4 else np.zeros_like(dirs)
    a = anchors[targets.loc_level[:, None], np.broadcast_to(anchor_dirs, (p, 4)), targets.bin_target]
    return a.pow2() * t.exp()


def head_loss(
    flat: Tensor,
    anchors: Tensor,
    targets: FlatTargets,
    num_classes: int,
    num_bins: int,
    uncertainty: bool = True,
    lambda_bin: float = 0.5,
    lambda_loc: float = 1.0,
    focal_alpha: float = 0.25,
    focal_gamma: float = 2.0,
    iou_mode: str = "log",
    mask: tuple[str, ...] = ("cls", "bin", "loc"),
) -> LossBreakdown:
    """Full detection loss on a flattened (M, C + 4(N+1) + 4N) head output.

    ``mask`` selects which terms enter the total (all by default); the
    breakdown always reports every term's value.
    """
    n_cls_pos = targets.num_cls_positive
    n_loc_pos = int(targets.loc_rows.size)
    l_cls = focal_loss(flat[:, :num_classes], targets.cls_target, focal_alpha, focal_gamma, max(1, n_cls_pos))
    norm_loc = max(1, n_loc_pos)
    if n_loc_pos:
        rows = flat[targets.loc_rows]
        raw = rows[:, num_classes : num_classes + 4 * (num_bins + 1)].reshape(n_loc_pos, 4, num_bins + 1)
        l_bin = bin_loss(raw, targets.bin_target, uncertainty, norm_loc)
        pred = decode_assigned(flat, anchors, targets, num_classes, num_bins)
        l_loc, clamped = iou_loss(pred, targets.border_target, iou_mode, norm_loc)
    else:
        l_bin, l_loc, clamped = Tensor(0.0), Tensor(0.0), 0
    terms = {"cls": l_cls, "bin": l_bin, "loc": l_loc}
    zero = Tensor(0.0)
    total = total_loss(
        terms["cls"] if "cls" in mask else zero,
        terms["bin"] if "bin" in mask else zero,
        terms["loc"] if "loc" in mask else zero,
        n_loc_pos > 0,
        lambda_bin,
        lambda_loc,
    )
    return LossBreakdown(
        total=total,
        cls=l_cls.item(),
        bin=l_bin.item(),
        loc=l_loc.item(),
        num_cls_positive=n_cls_pos,
        num_loc_positive=n_loc_pos,
        iou_clamped=clamped,
        lambda_bin=lambda_bin,
        lambda_loc=lambda_loc,
        terms=terms,
    )
