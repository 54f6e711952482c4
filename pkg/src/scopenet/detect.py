"""Inference: argmax-bin decoding, localization-guided scoring, top-K and NMS.

For each direction the bin with the highest tempered probability is chosen
and its regression decoded through that bin's anchor. In ``fused`` mode the
detection score is ``p_cls * p_loc`` where ``p_loc`` is the mean over the four
directions of the winning bin probability; ``cls_only`` uses ``p_cls``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import InferConfig
from .geometry import BorderDistances, Box, GeometryError, Point, distances_to_box, iou_matrix, location_points
from .model import split_output
from .scope_head import bin_probabilities


@dataclass
class Detection:
    box: Box
    class_id: int
    p_cls: float
    p_loc: float
    p_box: float
    bins: tuple[int, int, int, int]  # 1-based chosen bin per direction
    p_tilde: tuple[float, float, float, float]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def fuse_scores(p_cls: np.ndarray, p_tilde: np.ndarray, scoring_mode: str = "fused") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(p_loc, p_box)`` from class scores and (..., 4) max bin probabilities."""
    p_loc = np.asarray(p_tilde).mean(axis=-1)
    if scoring_mode == "fused":
        return p_loc, np.asarray(p_cls) * p_loc
    if scoring_mode == "cls_only":
        return p_loc, np.asarray(p_cls)
    raise ValueError(f"unknown scoring mode {scoring_mode!r}")


def decode_location(
    cls_logits: np.ndarray,
    bin_raw: np.ndarray,
    regression: np.ndarray,
    log_scales: np.ndarray,
    point: Point,
    scoring_mode: str = "fused",
    score_threshold: float = 0.05,
    uncertainty: bool = True,
) -> list[Detection]:
    """Decode one location: ``cls_logits`` (C,), ``bin_raw`` (4, N+1),
    ``regression`` (4, N), ``log_scales`` (4, N) or (N,)."""
    probs, _ = bin_probabilities(bin_raw, uncertainty)
    n_star = probs.argmax(axis=-1)
    p_tilde = probs.max(axis=-1)
    scales = np.broadcast_to(log_scales, regression.shape)
    d = np.exp2(scales[np.arange(4), n_star]) * np.exp(regression[np.arange(4), n_star])
    try:
        box = distances_to_box(BorderDistances(*map(float, d)), point)
    except GeometryError:
        return []
    p_cls = _sigmoid(np.asarray(cls_logits, dtype=np.float64))
    p_loc, p_box = fuse_scores(p_cls, np.broadcast_to(p_tilde, (p_cls.size, 4)), scoring_mode)
    out = []
    for c in np.flatnonzero(p_box > score_threshold):
        out.append(
            Detection(
                box=box,
                class_id=int(c) + 1,
                p_cls=float(p_cls[c]),
                p_loc=float(p_loc[c]),
                p_box=float(p_box[c]),
                bins=tuple(int(n) + 1 for n in n_star),
                p_tilde=tuple(float(p) for p in p_tilde),
            )
        )
    return out


@dataclass
class Detections:
    """Detections of one image as parallel arrays."""

    boxes: np.ndarray  # (n, 4)
    classes: np.ndarray  # (n,) 1-based
    p_cls: np.ndarray
    p_loc: np.ndarray
    p_box: np.ndarray
    level: np.ndarray
    location: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @classmethod
    def empty(cls) -> "Detections":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, 4)), zi, z, z, z, zi, zi)

    def take(self, idx: np.ndarray) -> "Detections":
        return Detections(
            self.boxes[idx], self.classes[idx], self.p_cls[idx], self.p_loc[idx], self.p_box[idx],
            self.level[idx], self.location[idx], self.dropped,
        )

    @staticmethod
    def concat(parts: list["Detections"]) -> "Detections":
        if not parts:
            return Detections.empty()
        return Detections(
            np.concatenate([p.boxes for p in parts]).reshape(-1, 4),
            np.concatenate([p.classes for p in parts]),
            np.concatenate([p.p_cls for p in parts]),
            np.concatenate([p.p_loc for p in parts]),
            np.concatenate([p.p_box for p in parts]),
            np.concatenate([p.level for p in parts]),
            np.concatenate([p.location for p in parts]),
            sum(p.dropped for p in parts),
        )


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores; ties keep input order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return order[:k]


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy class-wise suppression; returns kept indices, best first.

    A box is dropped when its IoU with an already kept box of the same class
    exceeds ``iou_threshold``. Score ties are broken by class then box
    coordinates, so the result does not depend on input order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], classes, -scores))
    keep = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        alive = np.ones(idx.size, dtype=bool)
        ious = iou_matrix(boxes[idx], boxes[idx])
        for i in range(idx.size):
            if not alive[i]:
                continue
            keep.append(idx[i])
            alive[i + 1 :] &= ious[i, i + 1 :] <= iou_threshold
    keep = np.array(keep, dtype=np.int64)
    rank = np.empty(order.size, dtype=np.int64)
    rank[order] = np.arange(order.size)
    return keep[np.argsort(rank[keep])]


def decode_level(
    out: np.ndarray,
    log_scales: np.ndarray,
    level: int,
    num_classes: int,
    num_bins: int,
    cfg: InferConfig,
    uncertainty: bool = True,
) -> list[Detections]:
    """Candidate detections of one level for every image in the batch."""
    sl = split_output(out, num_classes, num_bins)
    b, _, h, w = out.shape
    pts = location_points(level, h, w)
    bin_raw = sl.bin_raw.reshape(b, 4, num_bins + 1, h * w).transpose(0, 3, 1, 2)  # B, HW, 4, N+1
    reg = sl.regression.reshape(b, 4, num_bins, h * w).transpose(0, 3, 1, 2)  # B, HW, 4, N
    probs, _ = bin_probabilities(bin_raw, uncertainty)
    n_star = probs.argmax(axis=-1)  # B, HW, 4
    p_tilde = probs.max(axis=-1)
    scales = np.broadcast_to(log_scales, (4, num_bins))
    a = scales[np.arange(4)[None, None, :], n_star]
    t = np.take_along_axis(reg, n_star[..., None], axis=-1)[..., 0]
    d = np.exp2(a) * np.exp(t)
    boxes = np.stack(
        [pts[None, :, 0] - d[..., 0], pts[None, :, 1] - d[..., 1], pts[None, :, 0] + d[..., 2], pts[None, :, 1] + d[..., 3]],
        axis=-1,
    )
    valid = (boxes[..., 2] > boxes[..., 0]) & (boxes[..., 3] > boxes[..., 1]) & np.isfinite(boxes).all(axis=-1)
    p_cls = _sigmoid(sl.cls_logits.reshape(b, num_classes, h * w).transpose(0, 2, 1))  # B, HW, C
    p_loc, p_box = fuse_scores(p_cls, p_tilde[:, :, None, :].repeat(num_classes, axis=2), cfg.scoring_mode)
    results = []
    for i in range(b):
        cand = (p_box[i] > cfg.score_threshold) & valid[i][:, None]
        loc, cls = np.nonzero(cand)  # row-major: location first, then class
        dropped = int(((p_box[i] > cfg.score_threshold) & ~valid[i][:, None]).sum())
        sel = top_k(p_box[i][loc, cls], cfg.top_k)
        loc, cls = loc[sel], cls[sel]
        results.append(
            Detections(
                boxes=boxes[i][loc],
                classes=cls + 1,
                p_cls=p_cls[i][loc, cls],
                p_loc=p_loc[i][loc, cls],
                p_box=p_box[i][loc, cls],
                level=np.full(loc.size, level, dtype=np.int64),
                location=loc,
                dropped=dropped,
            )
        )
    return results


def postprocess(per_level: list[list[Detections]], cfg: InferConfig) -> list[Detections]:
    """Merge levels per image, apply class-wise NMS and the per-image cap."""
    n_images = len(per_level[0])
    out = []
    for i in range(n_images):
        dets = Detections.concat([lvl[i] for lvl in per_level])
        keep = nms(dets.boxes, dets.p_box, dets.classes, cfg.nms_threshold)[: cfg.max_detections]
        out.append(dets.take(keep))
    return out


def detect(model, images: np.ndarray, cfg: InferConfig, uncertainty: bool | None = None, batch_size: int = 32) -> list[Detections]:
    """Run ``model`` on (B, H, W) images and return post-processed detections."""
    from .autograd import no_grad

    if uncertainty is None:
        uncertainty = model.cfg.uncertainty
    mc = model.cfg
    anchors = model.anchors.data
    results: list[Detections] = []
    for start in range(0, len(images), batch_size):
        with no_grad():
            outs = model(images[start : start + batch_size])
        per_level = [
            decode_level(o.data, anchors[li], mc.first_level + li, mc.num_classes, mc.num_bins, cfg, uncertainty)
            for li, o in enumerate(outs)
        ]
        results.extend(postprocess(per_level, cfg))
    return results


def write_detections(path: str | Path, image_ids: Iterable[int], detections: Iterable[Detections]) -> None:
    """One JSON record per detection: image id, class, box, p_cls, p_loc, p_box."""
    with open(path, "w") as fh:
        for image_id, dets in zip(image_ids, detections):
            for j in range(len(dets)):
                x1, y1, x2, y2 = (float(v) for v in dets.boxes[j])
                rec = {
                    "image_id": int(image_id),
                    "class": int(dets.classes[j]),
                    "x1": x1,
                    "y1": y1,
                    "x2": x2,
                    "y2": y2,
                    "p_cls": float(dets.p_cls[j]),
                    "p_loc": float(dets.p_loc[j]),
                    "p_box": float(dets.p_box[j]),
                }
                fh.write(json.dumps(rec) + "\n")


def read_detections(path: str | Path) -> dict[int, Detections]:
    rows: dict[int, list[dict]] = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            rows.setdefault(rec["image_id"], []).append(rec)
    out = {}
    for image_id, recs in rows.items():
        n = len(recs)
        out[image_id] = Detections(
            boxes=np.array([[r["x1"], r["y1"], r["x2"], r["y2"]] for r in recs]).reshape(n, 4),
            classes=np.array([r["class"] for r in recs], dtype=np.int64),
            p_cls=np.array([r["p_cls"] for r in recs]),
            p_loc=np.array([r["p_loc"] for r in recs]),
            p_box=np.array([r["p_box"] for r in recs]),
            level=np.full(n, -1, dtype=np.int64),
            location=np.full(n, -1, dtype=np.int64),
        )
    return out
