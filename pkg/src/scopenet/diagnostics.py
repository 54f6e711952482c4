"""Finite-difference check of every loss term on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import SyntheticScene
from .gradcheck import GradcheckReport, gradcheck
from .model import ScopeNet
from .train import compute_loss, scene_targets

COMPONENTS = {
    "L_cls": ("cls",),
    "L_bin": ("bin",),
    "L_loc": ("loc",),
    "L_total": ("cls", "bin", "loc"),
}
GROUPS = ("backbone", "cls_head", "loc_head", "anchors")


def tiny_config(base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    return base.replace(
        model={"backbone_channels": [2, 3, 3], "head_channels": 3, "trunk_depth": 1},
        train={"dtype": "float64", "augment": False},
    )


def gradcheck_scene(size: int = 64) -> SyntheticScene:
    """Smooth image with one small and one large object, so both levels get positives."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    image = 0.5 + 0.3 * np.sin(5 * xx + 1) * np.cos(4 * yy)
    boxes = np.array([[10.25, 12.5, 30.0, 26.75], [3.0, 2.5, 61.0, 60.0]])
    return SyntheticScene(image=image, boxes=boxes, classes=np.array([2, 1]))


@dataclass
class ModelGradcheck:
    reports: dict[str, GradcheckReport]
    rel_tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    def group_errors(self) -> dict[str, dict[str, float]]:
        """Worst relative error per loss term and parameter group."""
        out = {}
        for comp, rep in self.reports.items():
            row = {}
            for g in GROUPS:
                errs = [p.max_rel_error for n, p in rep.params.items() if n.split(".")[0] == g]
                row[g] = max(errs) if errs else float("nan")
            out[comp] = row
        return out

    def lines(self) -> list[str]:
        lines = [f"{'term':8s} " + " ".join(f"{g:>10s}" for g in GROUPS) + "   status"]
        for comp, row in self.group_errors().items():
            status = "ok" if self.reports[comp].passed else "FAIL"
            lines.append(f"{comp:8s} " + " ".join(f"{row[g]:10.2e}" for g in GROUPS) + f"   {status}")
        return lines


def check_model_gradients(
    cfg: ExperimentConfig,
    step: float = 1e-5,
    rel_tol: float = 1e-3,
    max_entries: int | None = 48,
    seed: int = 0,
) -> ModelGradcheck:
    """Gradcheck each loss term with respect to every parameter tensor.

    Runs in float64 on :func:`gradcheck_scene`; ``max_entries`` caps the
    number of sampled entries per parameter tensor. The default covers every
    output bias of the tiny model, so each temperature channel is checked.
    """
    model = ScopeNet(cfg.model, seed=seed, dtype="float64")
    scene = gradcheck_scene()
    # move the anchors off their initial values so every path carries gradient
    model.anchors.data += np.random.default_rng(seed).normal(0, 0.1, model.anchors.shape)
    targets = [scene_targets(model, scene, cfg)]
    images = scene.image[None].astype(np.float64)
    params = dict(model.params)
    params["anchors"].requires_grad = True
    reports = {}
    for comp, mask in COMPONENTS.items():
        reports[comp] = gradcheck(
            lambda mask=mask: compute_loss(model, images, targets, cfg, mask=mask).total,
            params,
            step=step,
            rel_tol=rel_tol,
            max_entries=max_entries,
            seed=seed,
        )
    return ModelGradcheck(reports, rel_tol)


class _Reached(Exception):
    pass


def overfit_scene(
    cfg: ExperimentConfig,
    scene: SyntheticScene,
    max_steps: int = 2000,
    eval_every: int = 50,
    target: float = 1.0,
) -> tuple[int | None, list[tuple[int, float]]]:
    """Train on a single scene and return the first step whose AP50 reaches ``target``.

    The returned history holds ``(step, AP50)`` at every evaluation. The step is
    ``None`` if the target is never reached within ``max_steps``.
    """
    from .experiments import evaluate_model
    from .train import train

    cfg = cfg.replace(train={"steps": max_steps, "batch_size": 1, "augment": False})
    model = ScopeNet(cfg.model, seed=cfg.seed, dtype=cfg.train.dtype)
    history: list[tuple[int, float]] = []

    def probe(step, _):
        if (step + 1) % eval_every and step + 1 != max_steps:
            return
        ap50 = evaluate_model(model, cfg, [scene]).AP50
        history.append((step + 1, ap50))
        if ap50 >= target:
            raise _Reached

    try:
        train(model, [scene], cfg, callback=probe)
    except _Reached:
        return history[-1][0], history
    return None, history
