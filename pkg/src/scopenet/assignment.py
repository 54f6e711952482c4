"""Per-level positive/negative assignment of feature locations to objects.

A location is positive for a ground-truth box at level ``l`` when it lies
strictly inside the box, within radius ``r`` of the box center, and the
largest of its four border distances falls in the level's regression range.
The classification branch uses ``r_cls = 1.5 * 2**l``, the localization
branch ``r_loc = 2 * 2**l``; the two positive sets are computed separately.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geometry import location_points
from .scope_head import assign_bin_index

log = logging.getLogger(__name__)

MIN_GT_SIDE = 2.0


@dataclass(frozen=True)
class FpnLevelSpec:
    level: int
    lo: float
    hi: float = math.inf
    cls_radius_factor: float = 1.5
    loc_radius_factor: float = 2.0

    def __post_init__(self):
        if not 0 <= self.lo < self.hi:
            raise ValueError(f"level {self.level}: invalid regression range [{self.lo}, {self.hi})")
        if not 0 < self.cls_radius_factor < self.loc_radius_factor:
            raise ValueError(f"level {self.level}: need 0 < r_cls < r_loc")

    @property
    def stride(self) -> float:
        return 2.0**self.level

    @property
    def r_cls(self) -> float:
        return self.cls_radius_factor * self.stride

    @property
    def r_loc(self) -> float:
        return self.loc_radius_factor * self.stride

    def feature_size(self, height: int, width: int) -> tuple[int, int]:
        s = 2**self.level
        return -(-height // s), -(-width // s)


def default_levels(ranges: list[tuple[float, float]], first_level: int = 3, **kw) -> list[FpnLevelSpec]:
    return [FpnLevelSpec(first_level + i, lo, hi, **kw) for i, (lo, hi) in enumerate(ranges)]


def check_partition(levels: list[FpnLevelSpec]) -> None:
    """Raise unless the level ranges tile [0, inf) in order without overlap."""
    edge = 0.0
    for spec in levels:
        if spec.lo != edge:
            raise ValueError(f"level {spec.level} range starts at {spec.lo}, expected {edge}")
        edge = spec.hi
    if edge != math.inf:
        raise ValueError(f"regression ranges stop at {edge}, must reach infinity")


@dataclass
class TargetSet:
    """Training targets for every location of one level, in row-major order.

    ``bin_target`` is 0-based and -1 where the location is not a
    localization positive; ``cls_target`` is 0 for negatives.
    """

    level: int
    height: int
    width: int
    cls_target: np.ndarray  # (HW,) int
    cls_gt: np.ndarray  # (HW,) int, -1 if negative
    loc_positive: np.ndarray  # (HW,) bool
    loc_gt: np.ndarray  # (HW,) int
    border_target: np.ndarray  # (HW, 4) float, left/top/right/bottom
    bin_target: np.ndarray  # (HW, 4) int

    @property
    def num_cls_positive(self) -> int:
        return int((self.cls_target > 0).sum())

    @property
    def num_loc_positive(self) -> int:
        return int(self.loc_positive.sum())


def center_distance(points: np.ndarray, centers: np.ndarray, metric: str = "chebyshev") -> np.ndarray:
    dx = np.abs(points[:, None, 0] - centers[None, :, 0])
    dy = np.abs(points[:, None, 1] - centers[None, :, 1])
    if metric == "chebyshev":
        return np.maximum(dx, dy)
    if metric == "euclidean":
        return np.hypot(dx, dy)
    raise ValueError(f"unknown distance metric {metric!r}")


def resolve_overlaps(candidates: np.ndarray, areas: np.ndarray) -> np.ndarray:
    """Pick one object per location: smallest area wins, ties go to the lower index.

    ``candidates`` is a (P, G) boolean matrix; returns (P,) indices, -1 where a
    location has no candidate.
    """
    if candidates.shape[1] == 0:
        return np.full(candidates.shape[0], -1)
    cost = np.where(candidates, areas[None, :], np.inf)
    best = np.argmin(cost, axis=1)
    return np.where(candidates.any(axis=1), best, -1)


def _valid_gts(boxes: np.ndarray, classes: np.ndarray, num_classes: int | None):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if boxes.shape[0] != classes.shape[0]:
        raise ValueError("boxes and classes differ in length")
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("ground-truth boxes must have x1 < x2 and y1 < y2")
    if np.any(classes < 1) or (num_classes is not None and np.any(classes > num_classes)):
        raise ValueError(f"classes must lie in 1..{num_classes}")
    keep = ((boxes[:, 2] - boxes[:, 0]) >= MIN_GT_SIDE) & ((boxes[:, 3] - boxes[:, 1]) >= MIN_GT_SIDE)
    for i in np.flatnonzero(~keep):
        log.warning("skipping ground-truth box %d %s: side shorter than %g px", i, boxes[i].tolist(), MIN_GT_SIDE)
    return keep


def assign_level(
    boxes: np.ndarray,
    classes: np.ndarray,
    spec: FpnLevelSpec,
    edges: np.ndarray,
    height: int,
    width: int,
    metric: str = "chebyshev",
    num_classes: int | None = None,
) -> TargetSet:
    """Targets for one level of a ``height`` x ``width`` image."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    keep = _valid_gts(boxes, classes, num_classes)
    fh, fw = spec.feature_size(height, width)
    pts = location_points(spec.level, fh, fw)
    n_pts = pts.shape[0]

    d = np.stack(
        [
            pts[:, None, 0] - boxes[None, :, 0],
            pts[:, None, 1] - boxes[None, :, 1],
            boxes[None, :, 2] - pts[:, None, 0],
            boxes[None, :, 3] - pts[:, None, 1],
        ],
        axis=-1,
    )  # (P, G, 4)
    inside = d.min(axis=-1) > 0
    dmax = d.max(axis=-1)
    in_range = (dmax >= spec.lo) & (dmax < spec.hi)
    centers = np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], axis=1)
    dist = center_distance(pts, centers, metric)
    base = inside & in_range & keep[None, :]
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])

    cls_gt = resolve_overlaps(base & (dist <= spec.r_cls), areas)
    loc_gt = resolve_overlaps(base & (dist <= spec.r_loc), areas)

    cls_target = np.where(cls_gt >= 0, classes[np.maximum(cls_gt, 0)] if len(classes) else 0, 0)
    loc_pos = loc_gt >= 0
    border = np.zeros((n_pts, 4))
    bins = np.full((n_pts, 4), -1, dtype=np.int64)
    if loc_pos.any():
        rows = np.flatnonzero(loc_pos)
        border[rows] = d[rows, loc_gt[rows]]
        bins[rows] = assign_bin_index(edges, border[rows])
    return TargetSet(
        level=spec.level,
        height=fh,
        width=fw,
        cls_target=cls_target.astype(np.int64),
        cls_gt=cls_gt,
        loc_positive=loc_pos,
        loc_gt=loc_gt,
        border_target=border,
        bin_target=bins,
    )


def assign_targets(
    boxes: np.ndarray,
    classes: np.ndarray,
    levels: list[FpnLevelSpec],
    edges_per_level: list[np.ndarray],
    image_size: tuple[int, int],
    metric: str = "chebyshev",
    num_classes: int | None = None,
) -> list[TargetSet]:
    height, width = image_size
    return [
        assign_level(boxes, classes, spec, edges, height, width, metric, num_classes)
        for spec, edges in zip(levels, edges_per_level)
    ]
