"""Per-model temperature scaling fit by NLL minimization on held-out data.

Dividing logits by a positive temperature never changes the row argmax, so
calibration reshapes confidence without touching any model's accuracy.  The
fit runs a coarse log-spaced grid over [t_min, t_max] followed by golden-
section refinement around the grid minimum; the grid guards against local
minima, the refinement supplies precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .zeroshot import LogitMatrix

T_MIN_DEFAULT = 1e-2
T_MAX_DEFAULT = 1e2
GRID_POINTS_DEFAULT = 64
_INV_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class CalibrationResult:
    temperature: float
    final_nll: float
    search_trace: list[tuple[float, float]] = field(default_factory=list)


def nll(logits: LogitMatrix, labels: np.ndarray, split: np.ndarray, t: float) -> float:
    """Mean negative log-likelihood of the true labels under softmax(z / t).

    Written as log1p over the non-label exponent sum so confident-and-correct
    rows keep a tiny positive loss instead of underflowing to zero; the fit's
    tie-breaking depends on resolving those near-zero differences.
    """
    if t <= 0.0:
        raise ValueError(f"temperature must be > 0, got {t}")
    split = np.asarray(split, dtype=np.int64)
    if split.size == 0:
        raise ValueError("split is empty")
    labels = np.asarray(labels, dtype=np.int64)[split]
    z = logits.values[split]
    rows = np.arange(len(split))
    v = (z - z[rows, labels][:, None]) / t
    v[rows, labels] = -np.inf  # drop the label term; it contributes exp(0) = 1
    shift = np.maximum(v.max(axis=1), 0.0)
    small = shift == 0.0  # label is the (weak) argmax: log1p keeps precision
    others = np.exp(v - shift[:, None]).sum(axis=1)
    per_row = np.where(
        small,
        np.log1p(others),
        shift + np.log(np.exp(-shift) + others),
    )
    return float(per_row.mean())


def apply_temperature(logits: LogitMatrix, t: float) -> LogitMatrix:
    """Divide every entry by t; argmax per row is unchanged for any t > 0."""
    if t <= 0.0:
        raise ValueError(f"temperature must be > 0, got {t}")
    return LogitMatrix(
        values=logits.values / t, backbone_name=logits.backbone_name, mode=logits.mode
    )


def fit_temperature(
    logits: LogitMatrix,
    labels: np.ndarray,
    split: np.ndarray,
    t_min: float = T_MIN_DEFAULT,
    t_max: float = T_MAX_DEFAULT,
    grid_points: int = GRID_POINTS_DEFAULT,
) -> CalibrationResult:
    """Minimize NLL over the temperature, to 1e-4 relative bracket width.

    Ties at equal NLL resolve toward t = 1: if refinement finds nothing
    better than the uncalibrated NLL, the identity temperature is returned.
    """
    trace: list[tuple[float, float]] = []

    def f(t: float) -> float:
        value = nll(logits, labels, split, t)
        trace.append((t, value))
        return value

    grid = np.logspace(np.log10(t_min), np.log10(t_max), grid_points)
    grid_nll = np.array([f(t) for t in grid])
    # among exact grid ties, start from the temperature closest to 1
    tied = np.flatnonzero(grid_nll == grid_nll.min())
    best_idx = tied[np.argmin(np.abs(np.log(grid[tied])))]

    lo = grid[max(best_idx - 1, 0)]
    hi = grid[min(best_idx + 1, len(grid) - 1)]
    a, b = lo, hi
    c = b - _INV_GOLDEN * (b - a)
    d = a + _INV_GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > 1e-4 * max(a, t_min):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_GOLDEN * (b - a)
            fd = f(d)
    t_best = (a + b) / 2.0
    nll_best = f(t_best)

    nll_at_one = nll(logits, labels, split, 1.0)
    if nll_best >= nll_at_one - 1e-12:
        t_best, nll_best = 1.0, nll_at_one
    return CalibrationResult(temperature=float(t_best), final_nll=nll_best, search_trace=trace)
