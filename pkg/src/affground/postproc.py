"""Cascade filter that suppresses low-intensity regions of an
affordance map while leaving its peaks untouched.

Three thresholds are derived from the map maximum:
    t1 = gamma * max(M),  t2 = 0.4 * t1,  t3 = 0.2 * t2
and up to three passes are applied in order:
    M <- where(M >= t1, M, M^2 / t1)
    M <- where(M >= t2, M, M^2 / t2)
    M <- where(M >= t3, M, 0)
Each pass is a pointwise contraction (v^2/t <= v for v < t), so the
output never exceeds the input and the maximal pixels are preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class PostprocConfig:
    gamma: float = 0.45
    num_filtrations: int = 3

    def validate(self) -> "PostprocConfig":
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"postproc: gamma must be in [0, 1], got {self.gamma}")
        if self.num_filtrations not in (1, 2, 3):
            raise ConfigError(
                f"postproc: num_filtrations must be 1, 2 or 3, got {self.num_filtrations}"
            )
        return self


def postprocess(heatmap: np.ndarray, cfg: PostprocConfig = PostprocConfig()) -> np.ndarray:
    """Apply the first ``num_filtrations`` squash passes to a map of
    nonnegative values. A zero threshold makes its pass the identity
    (the >= condition then holds everywhere), so gamma = 0 and all-zero
    maps pass through unchanged."""
    cfg.validate()
    m = np.asarray(heatmap, dtype=np.float64)
    if m.size == 0:
        return m.copy()
    if m.min() < 0:
        raise ValueError(f"postprocess: map contains negative values (min {m.min()})")

    t1 = cfg.gamma * m.max()
    t2 = 0.4 * t1
    t3 = 0.2 * t2

    out = m.copy()
    if t1 > 0.0:
        out = np.where(out >= t1, out, out * out / t1)
    if cfg.num_filtrations >= 2 and t2 > 0.0:
        out = np.where(out >= t2, out, out * out / t2)
    if cfg.num_filtrations >= 3:
        out = np.where(out >= t3, out, 0.0)
    return out
