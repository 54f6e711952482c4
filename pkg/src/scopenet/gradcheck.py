"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autograd import Tensor, backward, no_grad

# Relative errors are measured against max(|analytic|, |numeric|, ABS_FLOOR) so
# entries whose true gradient is ~0 are judged on absolute error instead.
ABS_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int
    nonfinite: bool = False


@dataclass
class GradcheckReport:
    rel_tol: float
    params: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params.values()), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [
            n for n, p in self.params.items() if p.nonfinite or not p.max_rel_error < self.rel_tol
        ]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for name, p in self.params.items():
            flag = "FAIL" if name in self.failures else "ok"
            extra = " (non-finite)" if p.nonfinite else ""
            out.append(
                f"{flag:4s} {name:32s} max_rel={p.max_rel_error:.3e} "
                f"at {p.worst_index} analytic={p.analytic:.6e} numeric={p.numeric:.6e}"
                f" n={p.checked}{extra}"
            )
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return np.abs(analytic - numeric) / scale


def gradcheck(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare ``backward`` gradients of ``f`` with central differences.

    ``f`` takes no arguments and must read the current values of ``params``;
    entries are perturbed in place and restored. With ``max_entries`` set, a
    seeded random subset of each parameter's entries is checked.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    rng = np.random.default_rng(seed)
    report = GradcheckReport(rel_tol=rel_tol)
    for name, p in params.items():
        analytic_full = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                numeric[k] = (fp - fm) / (2.0 * step)
        analytic = analytic_full.reshape(-1)[idx]
        finite = bool(np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic)))
        if finite and idx.size:
            err = relative_error(analytic, numeric)
            k = int(np.argmax(err))
            worst = float(err[k])
        else:
            err = np.zeros(0)
            k, worst = 0, float("inf") if not finite else 0.0
        report.params[name] = ParamCheck(
            name=name,
            max_rel_error=worst,
            worst_index=tuple(int(v) for v in np.unravel_index(idx[k], p.shape)) if idx.size else (),
            analytic=float(analytic[k]) if idx.size else 0.0,
            numeric=float(numeric[k]) if idx.size else 0.0,
            checked=int(idx.size),
            nonfinite=not finite,
        )
    return report
