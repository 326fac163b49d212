"""ROI localization, patch grids, pyramid inputs and overlap-averaged reconstruction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    origin: tuple
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(v) for v in self.origin))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))

    @property
    def slices(self):
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.shape))

    def validate(self, volume_shape):
        o, s, v = np.array(self.origin), np.array(self.shape), np.array(volume_shape)
        if (o < 0).any() or (o + s > v).any() or (s < 1).any():
            raise ValueError(f"{self} does not lie inside volume {tuple(volume_shape)}")

    def to_json(self):
        return {"origin": list(self.origin), "shape": list(self.shape)}

    @classmethod
    def from_json(cls, d):
        return cls(d["origin"], d["shape"])


@dataclass
class PatchGrid:
    patch_size: tuple = (32, 32, 32)
    step: tuple = (5, 5, 5)
    positions: list = field(default_factory=list)


@dataclass
class Patch:
    data: np.ndarray
    origin: tuple  # relative to the ROI origin


def _triple(v):
    return tuple(int(x) for x in (v if np.ndim(v) else (v, v, v)))


def fit_box(origin, shape, volume_shape, patch_size) -> BoundingBox:
    """Grow ``shape`` to at least ``patch_size`` and shift it inside the volume."""
    vol = np.array(volume_shape)
    size = np.minimum(np.maximum(np.array(shape), np.array(patch_size)), vol)
    o = np.clip(np.array(origin), 0, vol - size)
    return BoundingBox(o, size)


def label_box(labels: np.ndarray, margin: int, patch_size) -> BoundingBox:
    """Bounding box of all nonzero labels padded by ``margin`` and fitted to the patch size."""
    idx = np.argwhere(labels > 0)
    if idx.size == 0:
        raise ValueError("label map has no foreground to box")
    lo = idx.min(0) - margin
    hi = idx.max(0) + 1 + margin
    vol = np.array(labels.shape)
    lo, hi = np.maximum(lo, 0), np.minimum(hi, vol)
    size = hi - lo
    grow = np.maximum(np.array(patch_size) - size, 0)
    return fit_box(lo - grow // 2, size, labels.shape, patch_size)


# -- mutual information -------------------------------------------------------

def _bin_indices(vol: np.ndarray, bins: int):
    v = np.asarray(vol, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return None
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def _mi_from_indices(ia: np.ndarray, ib: np.ndarray, bins: int) -> float:
    joint = np.bincount((ia * bins + ib).ravel(), minlength=bins * bins).astype(np.float64)
    joint = joint.reshape(bins, bins) / ia.size
    pa = joint.sum(1)
    pb = joint.sum(0)
    nz = joint > 0
    ratio = joint[nz] / (pa[:, None] * pb[None, :])[nz]
    return max(float(np.sum(joint[nz] * np.log(ratio))), 0.0)


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """MI in nats from the joint histogram of min-max normalised intensities."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    ia, ib = _bin_indices(a, bins), _bin_indices(b, bins)
    if ia is None or ib is None:
        return 0.0
    return _mi_from_indices(ia, ib, bins)


def _shifted_mi(ia, ib, t, bins):
    # reference content moved by +t: test voxel x pairs with reference voxel x - t
    sa, sb = [], []
    for d, n in zip(t, ia.shape):
        sa.append(slice(max(d, 0), n + min(d, 0)))
        sb.append(slice(max(-d, 0), n - max(d, 0)))
    return _mi_from_indices(ia[tuple(sa)], ib[tuple(sb)], bins)


def estimate_translation(test, reference, search: int = 8, bins: int = 32):
    """Integer shift maximising MI: coarse stride-2 scan, then stride-1 refinement."""
    ia, ib = _bin_indices(test, bins), _bin_indices(reference, bins)
    if ia is None or ib is None:
        return (0, 0, 0)
    coarse = range(-search, search + 1, 2)
    best_t, best = (0, 0, 0), _shifted_mi(ia, ib, (0, 0, 0), bins)
    for t in itertools.product(coarse, repeat=3):
        mi = _shifted_mi(ia, ib, t, bins)
        if mi > best:
            best_t, best = t, mi
    center = best_t
    for d in itertools.product((-1, 0, 1), repeat=3):
        t = tuple(c + e for c, e in zip(center, d))
        if max(abs(v) for v in t) > search:
            continue
        mi = _shifted_mi(ia, ib, t, bins)
        if mi > best:
            best_t, best = t, mi
    return best_t


def localize_roi(test: np.ndarray, references, patch_size=(32, 32, 32), search: int = 8, bins: int = 32):
    """Pick the most similar reference by MI, align it by translation, carry its box over.

    ``references`` is a list of ``(volume, BoundingBox)``.  Returns
    ``(box, reference_index, translation)``.
    """
    if not references:
        raise ValueError("localize_roi needs at least one reference")
    for vol, _ in references:
        if vol.shape != test.shape:
            raise ValueError(f"reference shape {vol.shape} differs from test shape {test.shape}")
    scores = [mutual_information(test, vol, bins) for vol, _ in references]
    k = int(np.argmax(scores))
    ref, box = references[k]
    t = estimate_translation(test, ref, search, bins)
    moved = fit_box(np.array(box.origin) + np.array(t), box.shape, test.shape, patch_size)
    return moved, k, t


# -- grids and patches --------------------------------------------------------

def axis_positions(extent: int, patch: int, step: int) -> list:
    last = extent - patch
    pos = list(range(0, last + 1, step))
    if pos[-1] != last:
        pos.append(last)
    return pos


def make_patch_grid(roi_shape, patch_size=(32, 32, 32), step=(5, 5, 5)) -> PatchGrid:
    roi_shape, patch_size, step = _triple(roi_shape), _triple(patch_size), _triple(step)
    if any(p > d for p, d in zip(patch_size, roi_shape)):
        raise ValueError(f"patch {patch_size} larger than ROI {roi_shape}")
    if min(step) < 1:
        raise ValueError("step must be >= 1")
    axes = [axis_positions(d, p, s) for d, p, s in zip(roi_shape, patch_size, step)]
    return PatchGrid(patch_size, step, list(itertools.product(*axes)))


def extract_patches(vol: np.ndarray, roi: BoundingBox, grid: PatchGrid) -> list:
    roi.validate(vol.shape)
    crop = vol[roi.slices]
    out = []
    for p in grid.positions:
        if any(a + b > c for a, b, c in zip(p, grid.patch_size, crop.shape)):
            raise ValueError(f"grid position {p} overruns ROI {crop.shape}")
        sl = tuple(slice(a, a + b) for a, b in zip(p, grid.patch_size))
        out.append(Patch(crop[sl].copy(), tuple(p)))
    return out


def pyramid_downsample(patch, levels: int = 2) -> list:
    """Average-pooled copies at factors 2, 4, ... of a patch (or raw array)."""
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    f = 2 ** levels
    if any(s % f for s in data.shape):
        raise ValueError(f"patch shape {data.shape} not divisible by {f}")
    out = []
    cur = data.astype(np.float64)
    for _ in range(levels):
        d, h, w = cur.shape
        cur = cur.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))
        out.append(cur.astype(data.dtype) if np.issubdtype(data.dtype, np.floating) else cur)
    return out


def reconstruct_probability(prob_patches, grid: PatchGrid, roi_shape) -> np.ndarray:
    """Overlap-averaged field from per-position patches shaped ``(C, *patch)`` or ``patch``."""
    roi_shape = _triple(roi_shape)
    if len(prob_patches) != len(grid.positions):
        raise ValueError(f"{len(prob_patches)} patches for {len(grid.positions)} grid positions")
    first = np.asarray(prob_patches[0])
    lead = first.shape[:-3]
    acc = np.zeros(lead + roi_shape, dtype=np.float64)
    count = np.zeros(roi_shape, dtype=np.float64)
    for patch, p in zip(prob_patches, grid.positions):
        patch = np.asarray(patch)
        if patch.shape != lead + tuple(grid.patch_size):
            raise ValueError(f"patch shape {patch.shape} does not match {lead + tuple(grid.patch_size)}")
        sl = tuple(slice(a, a + b) for a, b in zip(p, grid.patch_size))
        acc[(Ellipsis,) + sl] += patch
        count[sl] += 1
    if count.min() < 1:
        raise ValueError("grid leaves ROI voxels uncovered")
    return acc / count
