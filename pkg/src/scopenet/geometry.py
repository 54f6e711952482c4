"""Axis-aligned boxes, the four-border distance parameterization, and IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (np.isfinite([self.x1, self.y1, self.x2, self.y2]).all()):
            raise GeometryError(f"non-finite box {self}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> "Point":
        return Point((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


class Point(NamedTuple):
    x: float
    y: float


class BorderDistances(NamedTuple):
    """Distances from a point to the left, top, right and bottom box edges."""

    left: float
    top: float
    right: float
    bottom: float


def box_to_distances(p: Point, b: Box) -> BorderDistances:
    if not (b.x1 < p.x < b.x2 and b.y1 < p.y < b.y2):
        raise GeometryError(f"point {tuple(p)} is not strictly inside box {b.as_tuple()}")
    return BorderDistances(p.x - b.x1, p.y - b.y1, b.x2 - p.x, b.y2 - p.y)


def distances_to_box(d: BorderDistances, p: Point) -> Box:
    if min(d) < 0:
        raise GeometryError(f"negative border distance in {tuple(d)}")
    if d.left + d.right <= 0:
        raise GeometryError("degenerate width: left + right distance is zero")
    if d.top + d.bottom <= 0:
        raise GeometryError("degenerate height: top + bottom distance is zero")
    return Box(p.x - d.left, p.y - d.top, p.x + d.right, p.y + d.bottom)


def iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between rows of ``a`` (n, 4) and ``b`` (m, 4) in x1y1x2y2."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def location_points(level: int, height: int, width: int) -> np.ndarray:
    """Image-space centers of the cells of a stride-``2**level`` feature map.

    Returns an (height * width, 2) array of (x, y) in row-major cell order.
    """
    stride = 2.0**level
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride], axis=1)
