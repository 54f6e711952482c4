"""One-dimensional learnable anchors, bin assignment and tempered bin softmax.

A border distance ``d`` along one direction falls in one of ``N`` half-open
bins ``[b_n, b_{n+1})``. Each bin owns a learnable log2-scale ``a_n`` and the
border is decoded from a raw regression ``t`` as ``d = 2**a_n * exp(t)``.
Bin choice is an ``N``-way softmax whose scores are divided by a per-sample
temperature ``exp(s_{N+1})`` predicted alongside them.

Bin indices are 1-based in the scalar API (``decode_border``, ``assign_bin``)
and 0-based in the vectorized helpers (``assign_bin_index`` and friends).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor

DIRECTIONS = ("left", "top", "right", "bottom")
# exp() of a log-temperature outside this band under/overflows float64
_LOG_TEMP_BOUND = 700.0


class AnchorError(ValueError):
    pass


@dataclass
class ScopeAnchorSet:
    level: int
    edges: np.ndarray
    log_scales: np.ndarray
    bin_size: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        if self.edges.ndim != 1 or self.edges.size < 2:
            raise AnchorError("need at least two bin edges")
        if np.any(np.diff(self.edges) <= 0):
            raise AnchorError(f"bin edges must be strictly increasing: {self.edges}")
        if self.edges[0] < 0:
            raise AnchorError("first bin edge must be non-negative")
        if self.log_scales.shape != (self.num_bins,):
            raise AnchorError(f"expected {self.num_bins} log-scales, got {self.log_scales.shape}")

    @property
    def num_bins(self) -> int:
        return self.edges.size - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp2(self.log_scales)

    def _check_bin(self, n: int) -> int:
        if not 1 <= n <= self.num_bins:
            raise AnchorError(f"bin index {n} outside 1..{self.num_bins}")
        return n - 1


def init_anchor_set(level: int, regression_range: tuple[float, float], num_bins: int, bin_size: float = 1.0) -> ScopeAnchorSet:
    """Geometric bins ending at ``hi`` with each anchor at its bin's geometric mean.

    Edges: ``b_{N+1} = hi``, ``b_n = hi / 2**(bin_size * (N + 1 - n))`` for
    ``n >= 2`` and ``b_1 = lo``. A zero-based first bin gets the anchor
    ``b_2 / 2`` since its geometric mean is 0.
    """
    lo, hi = map(float, regression_range)
    if num_bins < 1:
        raise AnchorError("num_bins must be >= 1")
    if bin_size <= 0:
        raise AnchorError("bin_size must be positive")
    if not (0 <= lo < hi and math.isfinite(hi)):
        raise AnchorError(f"invalid regression range [{lo}, {hi})")
    n = np.arange(2, num_bins + 1)
    inner = hi / np.exp2(bin_size * (num_bins + 1 - n))
    edges = np.concatenate([[lo], inner, [hi]])
    if num_bins >= 2 and lo > 0 and inner[0] <= lo:
        raise AnchorError(
            f"range [{lo}, {hi}) too narrow for {num_bins} bins of log2-size {bin_size}: "
            f"second edge {inner[0]:.4g} <= {lo}"
        )
    lower = edges[:-1].copy()
    upper = edges[1:]
    centers = np.where(lower > 0, np.sqrt(np.where(lower > 0, lower, 1.0) * upper), upper / 2)
    return ScopeAnchorSet(level=level, edges=edges, log_scales=np.log2(centers), bin_size=bin_size)


def decode_border(anchors: ScopeAnchorSet, n: int, t: float) -> float:
    i = anchors._check_bin(n)
    return float(np.exp2(anchors.log_scales[i]) * np.exp(t))


def encode_border(anchors: ScopeAnchorSet, n: int, d: float) -> float:
    i = anchors._check_bin(n)
    if not d > 0:
        raise AnchorError(f"border distance must be positive, got {d}")
    return float(np.log(d) - anchors.log_scales[i] * math.log(2.0))


def assign_bin(anchors: ScopeAnchorSet, d: float) -> int:
    if d < 0:
        raise AnchorError(f"border distance must be non-negative, got {d}")
    return int(assign_bin_index(anchors.edges, np.asarray(d))) + 1


def assign_bin_index(edges: np.ndarray, d: np.ndarray) -> np.ndarray:
    """0-based bin index of each distance; values outside the edges clamp."""
    n = len(edges) - 1
    return np.clip(np.searchsorted(edges, d, side="right") - 1, 0, n - 1)


def decode_borders(log_scales: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.exp2(log_scales) * np.exp(t)


def encode_borders(log_scales: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.log(d) - log_scales * math.log(2.0)


def bin_probabilities(raw: np.ndarray, uncertainty: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Tempered softmax over the first ``N`` of ``N + 1`` raw scores.

    The last score is the log-temperature; it is excluded from the
    normalisation. With ``uncertainty=False`` the temperature is fixed at 1.
    Returns ``(probs[..., N], sigma2[...])``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    scores = raw[..., :-1]
    if uncertainty:
        log_t = np.clip(raw[..., -1], -_LOG_TEMP_BOUND, _LOG_TEMP_BOUND)
    else:
        log_t = np.zeros(raw.shape[:-1])
    sigma2 = np.exp(log_t)
    with np.errstate(over="ignore"):
        z = (scores - scores.max(axis=-1, keepdims=True)) * np.exp(-log_t)[..., None]
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), sigma2


def bin_log_probs(raw: Tensor, uncertainty: bool = True) -> Tensor:
    """Differentiable log of :func:`bin_probabilities` for raw scores (..., N + 1)."""
    n = raw.shape[-1] - 1
    scores = raw[..., :n]
    if uncertainty:
        scores = scores * (-raw[..., n:]).exp()
    return scores.log_softmax(axis=-1)
