"""COCO-protocol average precision / recall for box detections.

Matching runs per image and class: detections in descending score order are
greedily matched to the unmatched ground truth of highest IoU at or above the
threshold. Precision is interpolated at 101 recall points and averaged over
the IoU thresholds 0.50:0.05:0.95 and over classes with ground truth. Size
splits ignore ground truth outside the area range, and unmatched detections
outside it, as the COCO reference evaluator does.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import iou_matrix

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
MAX_DETS = (1, 10, 100)


class EvalError(ValueError):
    pass


@dataclass
class GroundTruth:
    boxes: np.ndarray  # (n, 4)
    classes: np.ndarray  # (n,)


@dataclass
class ImageDetections:
    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray


@dataclass
class EvalResult:
    AP: float
    AP50: float
    AP75: float
    APS: float
    APM: float
    APL: float
    AR1: float
    AR10: float
    AR100: float
    per_class_AP: dict[int, float]
    # precision[t, r, k, area, maxdet] and recall[t, k, area, maxdet], -1 where undefined
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    classes: list[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        keys = ("AP", "AP50", "AP75", "APS", "APM", "APL", "AR1", "AR10", "AR100")
        d = {k: float(getattr(self, k)) for k in keys}
        d["per_class_AP"] = {str(k): float(v) for k, v in self.per_class_AP.items()}
        return d


def _as_dets(d) -> ImageDetections:
    if isinstance(d, ImageDetections):
        return d
    # duck-type detect.Detections
    return ImageDetections(np.asarray(d.boxes).reshape(-1, 4), np.asarray(d.p_box), np.asarray(d.classes))


def _match_image(
    dt_boxes: np.ndarray, dt_scores: np.ndarray, gt_boxes: np.ndarray, gt_ignore: np.ndarray, dt_out_of_area: np.ndarray, thresholds: np.ndarray
):
    """Greedy matching of one image/class. Returns (dt_matched, dt_ignored) of shape (T, D)."""
    order = np.argsort(-dt_scores, kind="stable")
    dt_boxes, dt_out_of_area = dt_boxes[order], dt_out_of_area[order]
    g_order = np.argsort(gt_ignore, kind="stable")  # non-ignored first
    gt_boxes, gt_ignore = gt_boxes[g_order], gt_ignore[g_order]
    n_t, n_d, n_g = len(thresholds), len(dt_boxes), len(gt_boxes)
    matched = np.zeros((n_t, n_d), dtype=bool)
    ignored = np.zeros((n_t, n_d), dtype=bool)
    if n_g and n_d:
        ious = iou_matrix(dt_boxes, gt_boxes)
        for ti, thr in enumerate(thresholds):
            gt_taken = np.zeros(n_g, dtype=bool)
            for di in range(n_d):
                ok = ~gt_taken & (ious[di] >= min(thr, 1 - 1e-10))
                # a regular ground truth always beats an ignored one
                pool = ok & ~gt_ignore if (ok & ~gt_ignore).any() else ok
                if not pool.any():
                    continue
                cand = np.where(pool, ious[di], -1.0)
                # ties go to the later ground truth, as in the reference loop
                m = n_g - 1 - int(np.argmax(cand[::-1]))
                gt_taken[m] = True
                matched[ti, di] = True
                ignored[ti, di] = gt_ignore[m]
    ignored |= ~matched & dt_out_of_area[None, :]
    return order, matched, ignored


def evaluate(
    detections: Sequence,
    ground_truth: Sequence[GroundTruth],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    area_ranges: dict[str, tuple[float, float]] | None = None,
    max_dets: Sequence[int] = MAX_DETS,
    classes: Sequence[int] | None = None,
) -> EvalResult:
    """Evaluate per-image detections against per-image ground truth.

    ``detections[i]`` is an :class:`ImageDetections` or any object with
    ``boxes``, ``p_box`` and ``classes``; ``ground_truth[i]`` a
    :class:`GroundTruth`. ``area_ranges`` maps ``all``/``small``/``medium``/
    ``large`` to [lo, hi) box-area intervals.
    """
    if len(detections) != len(ground_truth):
        raise EvalError("detections and ground truth differ in image count")
    if not ground_truth or sum(len(g.classes) for g in ground_truth) == 0:
        raise EvalError("empty ground-truth set")
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    if area_ranges is None:
        area_ranges = {"all": (0.0, np.inf), "small": (0.0, 16.0**2), "medium": (16.0**2, 32.0**2), "large": (32.0**2, np.inf)}
    area_names = list(area_ranges)
    max_dets = list(max_dets)
    dets = [_as_dets(d) for d in detections]
    if classes is None:
        classes = sorted({int(c) for g in ground_truth for c in g.classes})
    classes = list(classes)
    n_t, n_r, n_k, n_a, n_m = len(thresholds), len(RECALL_THRESHOLDS), len(classes), len(area_names), len(max_dets)
    precision = -np.ones((n_t, n_r, n_k, n_a, n_m))
    recall = -np.ones((n_t, n_k, n_a, n_m))

    for ki, c in enumerate(classes):
        for ai, name in enumerate(area_names):
            lo, hi = area_ranges[name]
            per_image = []
            n_pos = 0
            for d, g in zip(dets, ground_truth):
                gm = np.asarray(g.classes) == c
                gb = np.asarray(g.boxes, dtype=np.float64).reshape(-1, 4)[gm]
                ga = (gb[:, 2] - gb[:, 0]) * (gb[:, 3] - gb[:, 1])
                g_ign = (ga < lo) | (ga >= hi)
                n_pos += int((~g_ign).sum())
                dm = np.asarray(d.classes) == c
                db = d.boxes[dm].reshape(-1, 4)
                ds = np.asarray(d.scores)[dm]
                keep = np.argsort(-ds, kind="stable")[: max(max_dets)]
                db, ds = db[keep], ds[keep]
                da = (db[:, 2] - db[:, 0]) * (db[:, 3] - db[:, 1])
                order, matched, ignored = _match_image(db, ds, gb, g_ign, (da < lo) | (da >= hi), thresholds)
                per_image.append((ds[order], matched, ignored))
            if n_pos == 0:
                continue
            for mi, md in enumerate(max_dets):
                scores = np.concatenate([s[:md] for s, _, _ in per_image])
                m_all = np.concatenate([m[:, :md] for _, m, _ in per_image], axis=1)
                i_all = np.concatenate([i[:, :md] for _, _, i in per_image], axis=1)
                order = np.argsort(-scores, kind="mergesort")
                m_all, i_all = m_all[:, order], i_all[:, order]
                tps = np.cumsum(m_all & ~i_all, axis=1).astype(np.float64)
                fps = np.cumsum(~m_all & ~i_all, axis=1).astype(np.float64)
                for ti in range(n_t):
                    tp, fp = tps[ti], fps[ti]
                    rc = tp / n_pos
                    pr = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
                    recall[ti, ki, ai, mi] = rc[-1] if rc.size else 0.0
                    precision[ti, :, ki, ai, mi] = interpolated_precision(rc, pr)

    def mean_ap(t_idx=slice(None), area="all", md=max(max_dets)):
        p = precision[t_idx, :, :, area_names.index(area), max_dets.index(md)]
        p = p[p > -1]
        return float(p.mean()) if p.size else -1.0

    def mean_ar(md, area="all"):
        r = recall[:, :, area_names.index(area), max_dets.index(md)]
        r = r[r > -1]
        return float(r.mean()) if r.size else -1.0

    def t_index(v):
        hits = np.flatnonzero(np.isclose(thresholds, v))
        return int(hits[0]) if hits.size else None

    per_class = {}
    for ki, c in enumerate(classes):
        p = precision[:, :, ki, area_names.index("all"), -1]
        p = p[p > -1]
        per_class[c] = float(p.mean()) if p.size else -1.0
    t50, t75 = t_index(0.5), t_index(0.75)
    return EvalResult(
        AP=mean_ap(),
        AP50=mean_ap(t50) if t50 is not None else -1.0,
        AP75=mean_ap(t75) if t75 is not None else -1.0,
        APS=mean_ap(area="small") if "small" in area_names else -1.0,
        APM=mean_ap(area="medium") if "medium" in area_names else -1.0,
        APL=mean_ap(area="large") if "large" in area_names else -1.0,
        AR1=mean_ar(1) if 1 in max_dets else -1.0,
        AR10=mean_ar(10) if 10 in max_dets else -1.0,
        AR100=mean_ar(100) if 100 in max_dets else -1.0,
        per_class_AP=per_class,
        precision=precision,
        recall=recall,
        classes=classes,
    )


def interpolated_precision(rc: np.ndarray, pr: np.ndarray, recall_thresholds: np.ndarray = RECALL_THRESHOLDS) -> np.ndarray:
    """Precision envelope sampled at ``recall_thresholds`` (0 beyond max recall)."""
    q = np.zeros(len(recall_thresholds))
    if rc.size == 0:
        return q
    env = np.maximum.accumulate(pr[::-1])[::-1]
    inds = np.searchsorted(rc, recall_thresholds, side="left")
    valid = inds < rc.size
    q[valid] = env[inds[valid]]
    return q


def pr_curve(result: EvalResult, iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Class-averaged interpolated precision at each of the 101 recall points."""
    ti = int(np.flatnonzero(np.isclose(IOU_THRESHOLDS, iou_threshold))[0])
    p = result.precision[ti, :, :, 0, -1]  # R, K
    valid = (p > -1).all(axis=0)
    prec = p[:, valid].mean(axis=1) if valid.any() else np.zeros(p.shape[0])
    return RECALL_THRESHOLDS.copy(), prec


def export_pr_curve(result: EvalResult, iou_threshold: float, path: str | Path) -> Path:
    recall, precision = pr_curve(result, iou_threshold)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recall", "precision"])
        for r, p in zip(recall, precision):
            w.writerow([f"{r:.2f}", f"{p:.6f}"])
    return path


def area_ranges(small: float, medium: float) -> dict[str, tuple[float, float]]:
    return {"all": (0.0, np.inf), "small": (0.0, small), "medium": (small, medium), "large": (medium, np.inf)}
