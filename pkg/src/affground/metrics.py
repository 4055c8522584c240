"""Heatmap agreement metrics and the split-level evaluation wrapper.

kld / sim treat both maps as distributions (normalized to unit mass);
nss standardizes the prediction and weights it by ground-truth mass.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError

KLD_EPS = 1e-10


def _checked_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"metric: shape mismatch {p.shape} vs {g.shape}")
    if p.min() < 0 or g.min() < 0:
        raise ValueError("metric: maps must be nonnegative")
    return p, g


def _normalized(m: np.ndarray, name: str) -> np.ndarray:
    total = m.sum()
    if total <= 0:
        raise ValueError(f"metric: {name} map is all zero")
    return m / total


def kld(pred, gt, eps: float = KLD_EPS) -> float:
    """sum_i gt_i * log(eps + gt_i / (eps + pred_i)) on unit-mass maps.
    The eps inside the log makes the self-divergence ~ -(n-1)*eps rather
    than exactly zero; with eps = 1e-10 that slack is negligible at any
    evaluated resolution."""
    p, g = _checked_pair(pred, gt)
    pn = _normalized(p, "prediction")
    gn = _normalized(g, "ground-truth")
    return float(np.sum(gn * np.log(eps + gn / (eps + pn))))


def sim(pred, gt) -> float:
    """Histogram intersection of the unit-mass maps; 1 at equality, 0 on
    disjoint support."""
    p, g = _checked_pair(pred, gt)
    return float(np.minimum(_normalized(p, "prediction"),
                            _normalized(g, "ground-truth")).sum())


def nss(pred, gt) -> float:
    """Mean of the standardized prediction weighted by ground-truth mass:
    (1/sum(gt)) * sum_i gt_i * (pred_i - mean) / std, population std.
    A constant prediction has zero std and scores 0 by convention."""
    p, g = _checked_pair(pred, gt)
    total = g.sum()
    if total <= 0:
        raise ValueError("metric: ground-truth map is all zero")
    std = p.std()
    if std == 0.0:
        return 0.0
    z = (p - p.mean()) / std
    return float(np.sum(z * g) / total)


def bilinear_resize(m: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Edge-aligned bilinear resampling to (H, W)."""
    m = np.asarray(m, dtype=np.float64)
    h_out, w_out = int(shape[0]), int(shape[1])
    h_in, w_in = m.shape
    if (h_in, w_in) == (h_out, w_out):
        return m.copy()

    def grid(n_out, n_in):
        if n_out == 1:
            return np.zeros(1), np.zeros(1, dtype=np.intp)
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(pos.astype(np.intp), n_in - 2) if n_in > 1 else np.zeros(n_out, dtype=np.intp)
        return pos - lo, lo

    fy, y0 = grid(h_out, h_in)
    fx, x0 = grid(w_out, w_in)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    fy = fy[:, None]
    fx = fx[None, :]
    top = m[y0][:, x0] * (1 - fx) + m[y0][:, x1] * fx
    bot = m[y1][:, x0] * (1 - fx) + m[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class MetricsReport:
    kld: float
    sim: float
    nss: float
    n_samples: int
    per_sample: list[dict] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    n_resized: int = 0

    def to_dict(self) -> dict:
        return {
            "kld": self.kld,
            "sim": self.sim,
            "nss": self.nss,
            "n_samples": self.n_samples,
            "n_resized": self.n_resized,
            "missing": list(self.missing),
            "per_sample": list(self.per_sample),
        }

    def write_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "kld", "sim", "nss"])
            for row in self.per_sample:
                writer.writerow([row["id"], f"{row['kld']:.9f}",
                                 f"{row['sim']:.9f}", f"{row['nss']:.9f}"])
            writer.writerow(["mean", f"{self.kld:.9f}", f"{self.sim:.9f}", f"{self.nss:.9f}"])


def score_pairs(pairs: list[tuple[str, np.ndarray, np.ndarray]],
                missing: list[str] | None = None) -> MetricsReport:
    """Compute per-sample metrics for (id, pred, gt) triples, resizing
    predictions to the ground-truth grid when they differ, and aggregate
    by arithmetic mean in id order."""
    pairs = sorted(pairs, key=lambda x: x[0])
    rows = []
    n_resized = 0
    for sample_id, pred, gt in pairs:
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape:
            pred = bilinear_resize(pred, gt.shape)
            n_resized += 1
        rows.append({
            "id": sample_id,
            "kld": kld(pred, gt),
            "sim": sim(pred, gt),
            "nss": nss(pred, gt),
        })
    n = len(rows)
    mean = lambda key: float(np.mean([r[key] for r in rows])) if n else float("nan")
    return MetricsReport(
        kld=mean("kld"), sim=mean("sim"), nss=mean("nss"),
        n_samples=n, per_sample=rows,
        missing=sorted(missing or []), n_resized=n_resized,
    )


def evaluate_split(pred_dir: Path, manifest_path: Path) -> MetricsReport:
    """Score every manifest record against pred_dir/<id>.pgm. Records
    without a prediction are listed in the report and excluded from the
    aggregate."""
    from .dataset import read_manifest  # local import: avoids a cycle
    from .pgm import read_pgm

    pred_dir = Path(pred_dir)
    manifest_path = Path(manifest_path)
    _, records = read_manifest(manifest_path)
    root = manifest_path.parent

    pairs = []
    missing = []
    for rec in records:
        pred_path = pred_dir / f"{rec.id}.pgm"
        if not pred_path.exists():
            missing.append(rec.id)
            continue
        gt = read_pgm(root / rec.label_path)
        pred = read_pgm(pred_path)
        pairs.append((rec.id, pred, gt))
    return score_pairs(pairs, missing=missing)
