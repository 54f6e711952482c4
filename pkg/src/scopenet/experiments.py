"""Reproducible train / evaluate runs, ablation variants and the anchor sweep."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, save_config
from .data import SyntheticScene, generate_dataset
from .detect import Detections, detect
from .evaluate import EvalResult, GroundTruth, area_ranges, evaluate
from .model import ScopeNet
from .train import train

log = logging.getLogger(__name__)

OUTPUT_ENV = "SCOPENET_OUT"
SWEEP_COLUMNS = ("size", "num", "AP", "AP50", "AP75", "APS", "APM", "APL")
DEFAULT_SIZES = (0.75, 1.0, 1.25)
DEFAULT_NUMS = (1, 3, 5, 7)


def output_root(out: str | Path | None = None) -> Path:
    return Path(out or os.environ.get(OUTPUT_ENV) or "runs")


def run_dir(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    return output_root(out) / cfg.train_hash()


@lru_cache(maxsize=8)
def _dataset(count: int, data_json: str, seed: int, num_classes: int) -> tuple[SyntheticScene, ...]:
    from .config import DataConfig

    d = json.loads(data_json)
    d["aspect_range"] = tuple(d["aspect_range"])
    return tuple(generate_dataset(count, DataConfig(**d), seed, num_classes))


def datasets(cfg: ExperimentConfig) -> tuple[list[SyntheticScene], list[SyntheticScene]]:
    """(train, test) scenes for ``cfg``; generated deterministically and memoised."""
    data = cfg.to_dict()["data"]
    key = json.dumps({k: v for k, v in data.items() if k not in ("train_count", "test_count", "train_seed", "test_seed")}, sort_keys=True)
    train_scenes = _dataset(cfg.data.train_count, key, cfg.data.train_seed, cfg.model.num_classes)
    test_scenes = _dataset(cfg.data.test_count, key, cfg.data.test_seed, cfg.model.num_classes)
    return list(train_scenes), list(test_scenes)


def build_model(cfg: ExperimentConfig) -> ScopeNet:
    return ScopeNet(cfg.model, seed=cfg.seed, dtype=cfg.train.dtype)


def train_run(cfg: ExperimentConfig, out: str | Path | None = None, scenes: list[SyntheticScene] | None = None, force: bool = False) -> Path:
    """Train ``cfg`` into its run directory unless a checkpoint already exists."""
    rd = run_dir(cfg, out)
    ckpt = rd / "model.ckpt"
    if ckpt.exists() and not force:
        return rd
    rd.mkdir(parents=True, exist_ok=True)
    save_config(cfg, rd / "config.json")
    if scenes is None:
        scenes, _ = datasets(cfg)
    model = build_model(cfg)
    start = time.perf_counter()
    result = train(model, scenes, cfg, metrics_path=rd / "metrics.jsonl")
    meta = {"config_hash": cfg.train_hash(), "final_loss": result.final_loss, "train_seconds": time.perf_counter() - start}
    save_checkpoint(ckpt, model.state_dict(), meta=meta)
    return rd


def load_model(cfg: ExperimentConfig, checkpoint: str | Path) -> ScopeNet:
    model = build_model(cfg)
    arrays, _ = load_checkpoint(checkpoint)
    model.load_state_dict(arrays)
    return model


def ground_truth(scenes: list[SyntheticScene]) -> list[GroundTruth]:
    return [GroundTruth(s.boxes, s.classes) for s in scenes]


def run_inference(model: ScopeNet, cfg: ExperimentConfig, scenes: list[SyntheticScene]) -> list[Detections]:
    images = np.stack([s.image for s in scenes]).astype(model.dtype)
    return detect(model, images, cfg.infer, uncertainty=cfg.model.uncertainty)


def evaluate_model(model: ScopeNet, cfg: ExperimentConfig, scenes: list[SyntheticScene]) -> EvalResult:
    dets = run_inference(model, cfg, scenes)
    return evaluate(
        dets,
        ground_truth(scenes),
        area_ranges=area_ranges(cfg.eval.small_area, cfg.eval.medium_area),
        classes=list(range(1, cfg.model.num_classes + 1)),
    )


def metrics_json(result: EvalResult) -> str:
    return json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"


def eval_run(cfg: ExperimentConfig, out: str | Path | None = None, checkpoint: str | Path | None = None) -> tuple[Path, EvalResult]:
    """Evaluate the trained run of ``cfg`` on its test split under ``cfg.infer``."""
    rd = run_dir(cfg, out)
    ckpt = Path(checkpoint) if checkpoint else rd / "model.ckpt"
    model = load_model(cfg, ckpt)
    _, test = datasets(cfg)
    result = evaluate_model(model, cfg, test)
    ed = rd / f"eval-{cfg.infer_hash()}"
    ed.mkdir(parents=True, exist_ok=True)
    save_config(cfg, ed / "config.json")
    (ed / "metrics.json").write_text(metrics_json(result))
    return ed, result


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> EvalResult:
    train_run(cfg, out)
    return eval_run(cfg, out)[1]


# --- ablations --------------------------------------------------------------


def table1_variants(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """Direct regression / multiple anchors / multiple anchors + re-scoring."""
    return {
        "direct_regression": base.replace(model={"num_bins": 1}, infer={"scoring_mode": "cls_only"}),
        "multi_anchor": base.replace(infer={"scoring_mode": "cls_only"}),
        "multi_anchor_rescore": base.replace(infer={"scoring_mode": "fused"}),
    }


def table4_variants(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """No localization score / localization score without and with the temperature."""
    return {
        "cls_only": base.replace(infer={"scoring_mode": "cls_only"}),
        "fused_no_uncertainty": base.replace(model={"uncertainty": False}, infer={"scoring_mode": "fused"}),
        "fused_uncertainty": base.replace(model={"uncertainty": True}, infer={"scoring_mode": "fused"}),
    }


# --- sweep ------------------------------------------------------------------


@dataclass
class SweepCell:
    size: float | None
    num: int
    metrics: dict | None
    error: str | None = None


def sweep_grid(sizes=DEFAULT_SIZES, nums=DEFAULT_NUMS) -> list[tuple[float | None, int]]:
    """One direct-regression row (size is meaningless for a single bin), then size x num."""
    cells: list[tuple[float | None, int]] = []
    if 1 in nums:
        cells.append((None, 1))
    cells.extend((s, n) for s in sizes for n in nums if n != 1)
    return cells


def sweep(base: ExperimentConfig, out: str | Path | None = None, sizes=DEFAULT_SIZES, nums=DEFAULT_NUMS) -> tuple[Path, list[SweepCell]]:
    """Train and evaluate every grid cell; completed cells are read from cache."""
    root = output_root(out)
    sweep_dir = root / f"sweep-{base.train_hash()}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for size, num in sweep_grid(sizes, nums):
        cfg = base.replace(model={"num_bins": num, "bin_size": base.model.bin_size if size is None else size})
        cache = run_dir(cfg, root) / f"eval-{cfg.infer_hash()}" / "metrics.json"
        try:
            if cache.exists():
                metrics = json.loads(cache.read_text())
            else:
                metrics = run_experiment(cfg, root).to_dict()
            cells.append(SweepCell(size, num, metrics))
        except Exception as exc:  # a failed cell is recorded and the sweep goes on
            log.error("sweep cell size=%s num=%d failed: %s", size, num, exc)
            cells.append(SweepCell(size, num, None, f"{type(exc).__name__}: {exc}"))
    write_sweep_csv(sweep_dir / "sweep.csv", cells)
    failures = [{"size": c.size, "num": c.num, "error": c.error} for c in cells if c.error]
    (sweep_dir / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return sweep_dir, cells


def write_sweep_csv(path: Path, cells: list[SweepCell]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for c in cells:
            size = "-" if c.size is None else f"{c.size:g}"
            if c.metrics is None:
                w.writerow([size, c.num] + ["nan"] * 6)
            else:
                w.writerow([size, c.num] + [f"{100 * c.metrics[k]:.1f}" for k in SWEEP_COLUMNS[2:]])

