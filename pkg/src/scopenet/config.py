"""Experiment configuration: nested dataclasses loaded from / saved to JSON.

A config file is a JSON object with optional sections ``data``, ``model``,
``assign``, ``loss``, ``train``, ``infer``, ``eval`` and a top-level
``seed``. Missing keys take the defaults below; unknown keys are rejected.
An infinite regression-range bound is written as ``null``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCORING_MODES = ("cls_only", "fused")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DataConfig:
    image_size: int = 64
    train_count: int = 500
    test_count: int = 200
    train_seed: int = 1000
    test_seed: int = 2000
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 8.0
    max_size: float = 48.0
    aspect_range: tuple[float, float] = (1.0, 3.0)
    max_iou: float = 0.3
    noise: float = 0.05


@dataclass
class ModelConfig:
    num_classes: int = 3
    first_level: int = 3
    ranges: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 32.0), (32.0, math.inf)])
    num_bins: int = 5
    bin_size: float = 1.0
    # upper anchor edge per level; null means the range's upper bound, or
    # twice its lower bound when that is infinite
    anchor_max: list[float | None] | None = None
    share_anchor_directions: bool = False
    learn_anchors: bool = True
    uncertainty: bool = True
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    head_channels: int = 48
    trunk_depth: int = 2
    prior_prob: float = 0.01


@dataclass
class AssignConfig:
    cls_radius_factor: float = 1.5
    loc_radius_factor: float = 2.0
    metric: str = "chebyshev"


@dataclass
class LossConfig:
    lambda_bin: float = 0.5
    lambda_loc: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    iou_mode: str = "log"


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_steps: int = 200
    grad_clip: float = 10.0
    dtype: str = "float64"
    # random flips / transposes of each training scene (boxes follow exactly)
    augment: bool = True
    log_every: int = 50


@dataclass
class InferConfig:
    scoring_mode: str = "fused"
    score_threshold: float = 0.05
    top_k: int = 1000
    nms_threshold: float = 0.5
    max_detections: int = 100


@dataclass
class EvalConfig:
    small_area: float = 16.0**2
    medium_area: float = 32.0**2


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    assign: AssignConfig = field(default_factory=AssignConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        validate(self)
        return self

    def to_dict(self) -> dict:
        return _encode(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **sections: dict) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(model={"num_bins": 1})``."""
        d = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                d[key] = {**d[key], **value}
            else:
                d[key] = value
        return from_dict(d)

    def train_hash(self) -> str:
        """Digest of every setting that influences the trained weights."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("seed", "data", "model", "assign", "loss", "train")}
        return _digest(keep)

    def infer_hash(self) -> str:
        d = self.to_dict()
        return _digest({"infer": d["infer"], "eval": d["eval"], "uncertainty": d["model"]["uncertainty"]})


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def _encode(obj: Any) -> Any:
    if isinstance(obj, float) and math.isinf(obj):
        return None
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    return obj


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "assign": AssignConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "eval": EvalConfig,
}


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _section(name: str, cls: type, raw: Any):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected an object")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    return cls(**kwargs)


def _pair(path: str, value: Any, allow_inf_hi: bool = False) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(path, "expected a [lo, hi] pair")
    lo, hi = value
    if hi is None and allow_inf_hi:
        hi = math.inf
    for v in (lo, hi):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(path, f"expected numbers, got {value!r}")
    return float(lo), float(hi)


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(d) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed", f"expected an integer, got {seed!r}")
    sections = {name: _section(name, cls, d.get(name)) for name, cls in _SECTIONS.items()}
    m = sections["model"]
    m.ranges = [_pair(f"model.ranges[{i}]", r, allow_inf_hi=True) for i, r in enumerate(m.ranges)]
    if m.anchor_max is not None:
        if not isinstance(m.anchor_max, list):
            raise ConfigError("model.anchor_max", "expected a list or null")
    m.backbone_channels = list(m.backbone_channels)
    sections["data"].aspect_range = _pair("data.aspect_range", sections["data"].aspect_range)
    cfg = ExperimentConfig(seed=seed, **sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    d, m, a, lo, t, inf = cfg.data, cfg.model, cfg.assign, cfg.loss, cfg.train, cfg.infer

    def need(cond: bool, path: str, msg: str) -> None:
        if not cond:
            raise ConfigError(path, msg)

    need(d.image_size >= 16, "data.image_size", "must be >= 16")
    need(d.train_count >= 1, "data.train_count", "must be >= 1")
    need(d.test_count >= 1, "data.test_count", "must be >= 1")
    need(1 <= d.min_objects <= d.max_objects, "data.max_objects", "need 1 <= min_objects <= max_objects")
    need(0 < d.min_size <= d.max_size, "data.min_size", "need 0 < min_size <= max_size")
    need(1.0 <= d.aspect_range[0] <= d.aspect_range[1], "data.aspect_range", "need 1 <= lo <= hi")
    need(0.0 <= d.max_iou <= 1.0, "data.max_iou", "must lie in [0, 1]")
    need(d.noise >= 0, "data.noise", "must be >= 0")

    need(m.num_classes >= 1, "model.num_classes", "must be >= 1")
    need(m.num_bins >= 1, "model.num_bins", "must be >= 1")
    need(m.bin_size > 0, "model.bin_size", "must be positive")
    need(len(m.ranges) >= 1, "model.ranges", "need at least one level")
    edge = 0.0
    for i, (rlo, rhi) in enumerate(m.ranges):
        need(rlo == edge, f"model.ranges[{i}]", f"must start at {edge} to partition [0, inf)")
        need(rhi > rlo, f"model.ranges[{i}]", "upper bound must exceed lower bound")
        edge = rhi
    need(math.isinf(edge), "model.ranges", "last range must be open-ended (null upper bound)")
    if m.anchor_max is not None:
        need(len(m.anchor_max) == len(m.ranges), "model.anchor_max", "one entry per level")
    need(m.first_level >= 1, "model.first_level", "must be >= 1")
    need(len(m.backbone_channels) == m.first_level, "model.backbone_channels", "one entry per stride-2 stage up to the first level")
    need(all(isinstance(c, int) and c > 0 for c in m.backbone_channels), "model.backbone_channels", "positive integers")
    need(m.head_channels > 0, "model.head_channels", "must be positive")
    need(m.trunk_depth >= 0, "model.trunk_depth", "must be >= 0")
    need(0 < m.prior_prob < 1, "model.prior_prob", "must lie in (0, 1)")

    need(0 < a.cls_radius_factor < a.loc_radius_factor, "assign.cls_radius_factor", "need 0 < cls < loc radius")
    need(a.metric in ("chebyshev", "euclidean"), "assign.metric", "chebyshev or euclidean")

    need(lo.lambda_bin >= 0 and lo.lambda_loc >= 0, "loss.lambda_bin", "weights must be >= 0")
    need(0 <= lo.focal_alpha <= 1, "loss.focal_alpha", "must lie in [0, 1]")
    need(lo.focal_gamma >= 0, "loss.focal_gamma", "must be >= 0")
    need(lo.iou_mode in ("log", "linear"), "loss.iou_mode", "log or linear")

    need(t.steps >= 1, "train.steps", "must be >= 1")
    need(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    need(t.lr > 0, "train.lr", "must be positive")
    need(0 <= t.momentum < 1, "train.momentum", "must lie in [0, 1)")
    need(t.dtype in ("float64", "float32"), "train.dtype", "float64 or float32")
    need(t.log_every >= 1, "train.log_every", "must be >= 1")

    need(inf.scoring_mode in SCORING_MODES, "infer.scoring_mode", f"one of {SCORING_MODES}")
    need(0 <= inf.score_threshold < 1, "infer.score_threshold", "must lie in [0, 1)")
    need(inf.top_k >= 1, "infer.top_k", "must be >= 1")
    need(0 < inf.nms_threshold <= 1, "infer.nms_threshold", "must lie in (0, 1]")
    need(inf.max_detections >= 1, "infer.max_detections", "must be >= 1")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json() + "\n")
