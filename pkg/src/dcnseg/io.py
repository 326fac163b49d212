"""NIfTI volumes and JSON dataset manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import nibabel as nib
import numpy as np

MANIFEST_VERSION = "1.0"


@dataclass
class Case:
    id: str
    image: np.ndarray
    labels: Optional[np.ndarray]
    spacing_mm: float
    seed: Optional[int] = None
    labeled: bool = True
    auxiliary: bool = False


def save_volume(path, data: np.ndarray, spacing_mm: float) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = np.diag([spacing_mm, spacing_mm, spacing_mm, 1.0])
    img = nib.Nifti1Image(np.asarray(data), affine)
    data = np.asarray(data)
    img.header.set_zooms((spacing_mm,) * 3 + (1.0,) * (data.ndim - 3))
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise OSError(f"cannot write volume {path}: {exc}") from exc
    return path


def load_volume(path):
    """Return ``(array, spacing_mm)``; labels come back as their stored integer dtype."""
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    zooms = img.header.get_zooms()[:3]
    if not np.allclose(zooms, zooms[0]):
        raise ValueError(f"{path}: anisotropic spacing {zooms} is not supported")
    return data, float(zooms[0])


def write_manifest(path, cases: list, spacing_mm: float, **extra) -> Path:
    path = Path(path)
    doc = {"cases": cases, "spacing_mm": spacing_mm, "version": MANIFEST_VERSION}
    doc.update(extra)
    path.write_text(json.dumps(doc, indent=2))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    doc["_root"] = str(path.parent)
    return doc


def load_cases(manifest, labeled: Optional[bool] = None) -> list:
    """Load the cases of a manifest (path or parsed dict).

    ``labeled`` filters on the manifest flag; auxiliary labels count as labels.
    """
    doc = read_manifest(manifest) if not isinstance(manifest, dict) else manifest
    root = Path(doc.get("_root", "."))
    out = []
    for entry in doc["cases"]:
        if labeled is not None and bool(entry.get("labeled")) != labeled:
            continue
        image, spacing = load_volume(root / entry["image"])
        labels = None
        if entry.get("label"):
            labels, _ = load_volume(root / entry["label"])
            labels = labels.astype(np.uint8)
        out.append(
            Case(
                id=entry["id"],
                image=image.astype(np.float32),
                labels=labels,
                spacing_mm=spacing,
                seed=entry.get("seed"),
                labeled=bool(entry.get("labeled")),
                auxiliary=bool(entry.get("auxiliary", False)),
            )
        )
    return out
