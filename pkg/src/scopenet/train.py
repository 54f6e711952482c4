"""SGD-with-momentum training loop over precomputed per-scene targets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .assignment import TargetSet, assign_targets
from .autograd import backward
from .config import ExperimentConfig
from .data import SyntheticScene
from .losses import LossBreakdown, flatten_targets, head_loss
from .model import ScopeNet, level_specs

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, base_lr: float, total: int, warmup: int) -> float:
    """Linear warm-up, then 10x drops at 2/3 and 8/9 of ``total`` steps."""
    if warmup and step < warmup:
        return base_lr * (0.1 + 0.9 * step / warmup)
    if step >= total * 8 // 9:
        return base_lr * 0.01
    if step >= total * 2 // 3:
        return base_lr * 0.1
    return base_lr


def scene_targets(model: ScopeNet, scene: SyntheticScene, cfg: ExperimentConfig) -> list[TargetSet]:
    specs = level_specs(cfg.model, cfg.assign)
    edges = [s.edges for s in model.anchor_sets]
    return assign_targets(
        scene.boxes, scene.classes, specs, edges, scene.image.shape, cfg.assign.metric, cfg.model.num_classes
    )


def dihedral(image: np.ndarray, boxes: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply one of the 8 flips/transposes of a square image to image and boxes.

    Bit 2 of ``k`` transposes, bit 0 flips left-right, bit 1 flips top-bottom.
    """
    h, w = image.shape
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    if k & 4:
        image, b = image.T, b[:, [1, 0, 3, 2]]
        h, w = w, h
    if k & 1:
        image, b = image[:, ::-1], np.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], axis=1)
    if k & 2:
        image, b = image[::-1, :], np.stack([b[:, 0], h - b[:, 3], b[:, 2], h - b[:, 1]], axis=1)
    return np.ascontiguousarray(image), b


def compute_loss(model: ScopeNet, images: np.ndarray, targets: list[list[TargetSet]], cfg: ExperimentConfig, mask=("cls", "bin", "loc")) -> LossBreakdown:
    flat = ScopeNet.flatten(model(images))
    lc = cfg.loss
    return head_loss(
        flat,
        model.anchors,
        flatten_targets(targets),
        cfg.model.num_classes,
        cfg.model.num_bins,
        uncertainty=cfg.model.uncertainty,
        lambda_bin=lc.lambda_bin,
        lambda_loc=lc.lambda_loc,
        focal_alpha=lc.focal_alpha,
        focal_gamma=lc.focal_gamma,
        iou_mode=lc.iou_mode,
        mask=mask,
    )


@dataclass
class SGD:
    params: dict
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay and name != "anchors":
                g = g + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data -= lr * v


def clip_gradients(params: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            p.grad *= scale
    return total


@dataclass
class TrainResult:
    model: ScopeNet
    records: list[dict]
    initial_loss: float
    final_loss: float


def train(
    model: ScopeNet,
    scenes: list[SyntheticScene],
    cfg: ExperimentConfig,
    metrics_path: str | Path | None = None,
    callback: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Run ``cfg.train.steps`` SGD steps on mini-batches drawn from ``scenes``.

    Raises :class:`TrainingDiverged` when the smoothed loss exceeds ten times
    the first-step loss.
    """
    tc = cfg.train
    n_views = 8 if tc.augment else 1
    if tc.augment and scenes and scenes[0].image.shape[0] != scenes[0].image.shape[1]:
        raise ValueError("augmentation needs square images")
    views: dict[tuple[int, int], tuple[np.ndarray, list[TargetSet]]] = {}

    def view(i: int, k: int):
        if (i, k) not in views:
            img, boxes = dihedral(scenes[i].image, scenes[i].boxes, k)
            moved = SyntheticScene(img, boxes, scenes[i].classes)
            views[i, k] = (img.astype(model.dtype), scene_targets(model, moved, cfg))
        return views[i, k]

    rng = np.random.default_rng([cfg.seed, 7])
    params = model.trainable()
    opt = SGD(params, tc.lr, tc.momentum, tc.weight_decay)
    order = np.empty(0, dtype=np.int64)
    records: list[dict] = []
    initial = smoothed = None
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(tc.steps):
            if order.size < tc.batch_size:
                order = np.concatenate([order, rng.permutation(len(scenes))])
            batch, order = order[: tc.batch_size], order[tc.batch_size :]
            ks = rng.integers(0, n_views, size=batch.size)
            picked = [view(int(i), int(k)) for i, k in zip(batch, ks)]
            model.zero_grad()
            br = compute_loss(model, np.stack([p[0] for p in picked]), [p[1] for p in picked], cfg)
            value = br.total_value
            if not math.isfinite(value):
                raise TrainingDiverged(f"step {step}: non-finite loss")
            if initial is None:
                initial = smoothed = value
            smoothed = 0.9 * smoothed + 0.1 * value
            if smoothed > DIVERGENCE_FACTOR * initial:
                raise TrainingDiverged(
                    f"step {step}: smoothed loss {smoothed:.4g} exceeds {DIVERGENCE_FACTOR:g}x initial {initial:.4g}"
                )
            backward(br.total)
            gnorm = clip_gradients(params, tc.grad_clip)
            lr = lr_at(step, tc.lr, tc.steps, tc.warmup_steps)
            opt.step(lr)
            if callback is not None:
                callback(step, br)
            if step % tc.log_every == 0 or step == tc.steps - 1:
                rec = br.record(step)
                rec.update(lr=lr, grad_norm=gnorm)
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh:
            fh.close()
    return TrainResult(model=model, records=records, initial_loss=initial, final_loss=smoothed)
