"""Small convolutional detector with a classification and a scope-head branch.

Backbone: one 3x3 stride-2 convolution per octave, so the map after stage
``l`` has stride ``2**l``; levels beyond the first add one more stride-2
convolution each. Both head branches are shared across levels: a trunk of
``trunk_depth`` 3x3 convolutions followed by an output convolution. Per
location the concatenated output has ``C + 4(N+1) + 4N`` channels, laid out
as class logits, then bin scores (direction-major, log-temperature last in
each direction), then border regressions (direction-major).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assignment import FpnLevelSpec
from .autograd import Tensor, concat, conv2d
from .config import AssignConfig, ModelConfig
from .scope_head import ScopeAnchorSet, init_anchor_set


class ModelError(RuntimeError):
    pass


def output_channels(num_classes: int, num_bins: int) -> int:
    return num_classes + 4 * (num_bins + 1) + 4 * num_bins


def level_specs(cfg: ModelConfig, assign: AssignConfig | None = None) -> list[FpnLevelSpec]:
    assign = assign or AssignConfig()
    return [
        FpnLevelSpec(cfg.first_level + i, lo, hi, assign.cls_radius_factor, assign.loc_radius_factor)
        for i, (lo, hi) in enumerate(cfg.ranges)
    ]


def anchor_sets(cfg: ModelConfig) -> list[ScopeAnchorSet]:
    """Initial anchors per level; bins always start at 0 (see ``ModelConfig.anchor_max``)."""
    sets = []
    for i, (lo, hi) in enumerate(cfg.ranges):
        top = cfg.anchor_max[i] if cfg.anchor_max is not None else None
        if top is None:
            if math.isfinite(hi):
                top = hi
            else:
                top = 2.0 * lo if lo > 0 else 2.0 ** (cfg.first_level + i + 3)
        sets.append(init_anchor_set(cfg.first_level + i, (0.0, top), cfg.num_bins, cfg.bin_size))
    return sets


@dataclass
class HeadSlices:
    """numpy views of one level's output, each with batch and spatial axes last."""

    cls_logits: np.ndarray  # (B, C, H, W)
    bin_raw: np.ndarray  # (B, 4, N + 1, H, W)
    regression: np.ndarray  # (B, 4, N, H, W)


def split_output(out: np.ndarray, num_classes: int, num_bins: int) -> HeadSlices:
    b, ch, h, w = out.shape
    if ch != output_channels(num_classes, num_bins):
        raise ModelError(f"expected {output_channels(num_classes, num_bins)} channels, got {ch}")
    c, nb = num_classes, 4 * (num_bins + 1)
    return HeadSlices(
        cls_logits=out[:, :c],
        bin_raw=out[:, c : c + nb].reshape(b, 4, num_bins + 1, h, w),
        regression=out[:, c + nb :].reshape(b, 4, num_bins, h, w),
    )


class ScopeNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: str = "float64"):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.anchor_sets = anchor_sets(cfg)
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)

    # --- parameters ----------------------------------------------------
    def _conv(self, name: str, rng: np.random.Generator, cin: int, cout: int, std: float | None = None, bias: float = 0.0):
        fan_in = cin * 9
        std = math.sqrt(2.0 / fan_in) if std is None else std
        w = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(self.dtype)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.params[f"{name}.bias"] = Tensor(np.full(cout, bias, dtype=self.dtype), requires_grad=True, name=f"{name}.bias")

    def _init_params(self, seed: int) -> None:
        """He-normal (std sqrt(2 / fan_in)) hidden convolutions; N(0, 0.01) output layers.

        The class bias starts at -log((1 - pi) / pi) so every sigmoid begins
        near the prior ``pi``; bin, temperature and regression outputs start
        at 0 so each border decodes to its anchor with temperature 1.
        """
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        cin = 1
        for i, cout in enumerate(cfg.backbone_channels):
            self._conv(f"backbone.stage{i + 1}", rng, cin, cout)
            cin = cout
        for li in range(1, len(cfg.ranges)):
            self._conv(f"backbone.extra{li}", rng, cin, cin)
        hc = cfg.head_channels
        for branch in ("cls_head", "loc_head"):
            c = cin
            for d in range(cfg.trunk_depth):
                self._conv(f"{branch}.trunk{d}", rng, c, hc)
                c = hc
        c_trunk = hc if cfg.trunk_depth else cin
        prior_bias = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)
        self._conv("cls_head.out", rng, c_trunk, cfg.num_classes, std=0.01, bias=prior_bias)
        self._conv("loc_head.out", rng, c_trunk, 4 * (cfg.num_bins + 1) + 4 * cfg.num_bins, std=0.01)
        a = np.stack([s.log_scales for s in self.anchor_sets])  # (L, N)
        dirs = 1 if cfg.share_anchor_directions else 4
        a = np.repeat(a[:, None, :], dirs, axis=1).astype(self.dtype)
        self.params["anchors"] = Tensor(a, requires_grad=cfg.learn_anchors, name="anchors")

    @property
    def anchors(self) -> Tensor:
        return self.params["anchors"]

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ModelError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ModelError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype).copy()
            p.zero_grad()

    def learned_anchor_sets(self) -> list[np.ndarray]:
        """Current log2 anchor scales per level, shape (4, N) each."""
        a = self.anchors.data
        return [np.broadcast_to(a[i], (4, a.shape[2])).copy() for i in range(a.shape[0])]

    # --- forward -------------------------------------------------------
    def _apply(self, name: str, x: Tensor, stride: int = 1, relu: bool = True) -> Tensor:
        y = conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride, padding=1)
        return y.relu() if relu else y

    def features(self, images) -> list[Tensor]:
        x = _as_batch(images, self.dtype)
        for i in range(len(self.cfg.backbone_channels)):
            x = self._apply(f"backbone.stage{i + 1}", x, stride=2)
        feats = [x]
        for li in range(1, len(self.cfg.ranges)):
            x = self._apply(f"backbone.extra{li}", x, stride=2)
            feats.append(x)
        return feats

    def _branch(self, name: str, f: Tensor) -> Tensor:
        for d in range(self.cfg.trunk_depth):
            f = self._apply(f"{name}.trunk{d}", f)
        return self._apply(f"{name}.out", f, relu=False)

    def forward(self, images) -> list[Tensor]:
        """Per-level (B, C + 4(N+1) + 4N, H, W) outputs."""
        outs = []
        for li, f in enumerate(self.features(images)):
            out = concat([self._branch("cls_head", f), self._branch("loc_head", f)], axis=1)
            if not np.all(np.isfinite(out.data)):
                raise ModelError(f"non-finite activations at level {self.cfg.first_level + li}")
            outs.append(out)
        return outs

    __call__ = forward

    @staticmethod
    def flatten(outputs: list[Tensor]) -> Tensor:
        """Rows ordered level-major, then image, then row-major location."""
        rows = []
        for out in outputs:
            b, ch, h, w = out.shape
            rows.append(out.transpose(0, 2, 3, 1).reshape(b * h * w, ch))
        return concat(rows, axis=0)


def _as_batch(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        x = images
    else:
        arr = np.asarray(images, dtype=dtype)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[:, None]
        x = Tensor(arr)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ModelError(f"expected (B, 1, H, W) images, got {x.shape}")
    return x
