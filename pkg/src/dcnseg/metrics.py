"""Dice, centre-of-mass distance, mean surface distance and volume per structure."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

STRUCTURES = {1: "dentate", 2: "interposed"}
FIELDS = ("dc", "cmd_mm", "msd_mm", "volume_mm3", "gt_volume_mm3")

class UndefinedMetricError(ValueError):
    pass


def _spacing(spacing_mm, ndim=3):
    s = np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64), (ndim,))
    return tuple(float(v) for v in s)


def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def center_of_mass_distance(a, b, spacing_mm, name="structure") -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() or not b.any():
        raise UndefinedMetricError(f"center-of-mass distance undefined: empty {name}")
    s = np.array(_spacing(spacing_mm, a.ndim))
    ca = np.argwhere(a).mean(0) * s
    cb = np.argwhere(b).mean(0) * s
    return float(np.linalg.norm(ca - cb))


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background neighbour (outside counts as background)."""
    mask = np.asarray(mask, bool)
    struct = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, struct, border_value=0)


def mean_surface_distance(a, b, spacing_mm, name="structure") -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() or not b.any():
        raise UndefinedMetricError(f"mean surface distance undefined: empty {name}")
    s = _spacing(spacing_mm, a.ndim)
    sa, sb = surface(a), surface(b)
    to_b = ndimage.distance_transform_edt(~sb, sampling=s)
    to_a = ndimage.distance_transform_edt(~sa, sampling=s)
    return float(0.5 * (to_b[sa].mean() + to_a[sb].mean()))


@dataclass
class StructureMetrics:
    dc: float
    cmd_mm: Optional[float]
    msd_mm: Optional[float]
    volume_mm3: float
    gt_volume_mm3: float
    defined: bool = True


@dataclass
class MetricsReport:
    case_id: str
    structures: dict  # name -> StructureMetrics

    def to_dict(self):
        return {"case_id": self.case_id, "structures": {k: asdict(v) for k, v in self.structures.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["case_id"], {k: StructureMetrics(**v) for k, v in d["structures"].items()})


def evaluate_case(pred: np.ndarray, gt: np.ndarray, spacing_mm, case_id: str = "case") -> MetricsReport:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    voxel = float(np.prod(_spacing(spacing_mm, pred.ndim)))
    out = {}
    for cls, name in STRUCTURES.items():
        p, g = pred == cls, gt == cls
        try:
            cmd = center_of_mass_distance(p, g, spacing_mm, name)
            msd = mean_surface_distance(p, g, spacing_mm, name)
            defined = True
        except UndefinedMetricError:
            cmd = msd = None
            defined = False
        out[name] = StructureMetrics(
            dc=dice_coefficient(p, g),
            cmd_mm=cmd,
            msd_mm=msd,
            volume_mm3=float(p.sum()) * voxel,
            gt_volume_mm3=float(g.sum()) * voxel,
            defined=defined,
        )
    return MetricsReport(case_id, out)


def aggregate(reports: list) -> dict:
    """Mean and population std per structure and field; undefined values are skipped."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for name in STRUCTURES.values():
        out[name] = {}
        for f in FIELDS:
            vals = [getattr(r.structures[name], f) for r in reports]
            vals = np.array([v for v in vals if v is not None], dtype=np.float64)
            out[name][f] = {
                "mean": float(vals.mean()) if vals.size else None,
                "std": float(vals.std()) if vals.size else None,
                "n": int(vals.size),
            }
    return out


def write_reports_json(path, reports: list, extra: Optional[dict] = None):
    doc = {"cases": [r.to_dict() for r in reports], "aggregate": aggregate(reports)}
    if extra:
        doc.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2))


def write_table_csv(path, reports: list):
    """One row per case and structure with the CMD/MSD/DC/volume columns."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "structure", "CMD", "MSD", "DC", "volume", "gt_volume"])
        for r in reports:
            for name, m in r.structures.items():
                w.writerow([r.case_id, name, m.cmd_mm, m.msd_mm, m.dc, m.volume_mm3, m.gt_volume_mm3])
