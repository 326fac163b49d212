"""Synthetic volumes with a crescent 'dentate' and a small adjacent 'interposed' blob.

Both structures are hypo-intense, adjacent (1-2 voxel gap) and imbalanced in
volume; optional isointense confounder blobs sit away from the labels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import save_volume, write_manifest

BACKGROUND, DENTATE, INTERPOSED = 0, 1, 2
MAX_SHIFT = 6
CONFOUNDER_CLEARANCE = 8


class PhantomConfigError(ValueError):
    pass


@dataclass
class PhantomConfig:
    volume_shape: tuple = (64, 64, 64)
    spacing_mm: float = 1.25
    dentate_volume_voxels: int = 1000
    imbalance_ratio: float = 12.6
    contrast: float = 0.25
    noise_sigma: float = 0.08
    confounder_count: int = 2
    bg_mean: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        self.validate()

    def validate(self):
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 48:
            raise PhantomConfigError(f"volume_shape {self.volume_shape}: every axis must be >= 48")
        if self.spacing_mm <= 0:
            raise PhantomConfigError("spacing_mm must be positive")
        if self.dentate_volume_voxels < 1:
            raise PhantomConfigError("dentate_volume_voxels must be positive")
        if not self.imbalance_ratio > 1:
            raise PhantomConfigError("imbalance_ratio must exceed 1")
        if not 0 < self.contrast < 1:
            raise PhantomConfigError("contrast must lie in (0, 1)")
        if self.noise_sigma < 0 or self.confounder_count < 0:
            raise PhantomConfigError("noise_sigma and confounder_count must be nonnegative")
        if self.bg_mean <= 0:
            raise PhantomConfigError("bg_mean must be positive")


@dataclass
class PhantomCase:
    image: np.ndarray
    labels: np.ndarray
    meta: dict


def _grid(shape):
    return np.indices(shape, dtype=np.float64)


def _ellipsoid(grid, center, radii):
    q = sum(((grid[k] - center[k]) / radii[k]) ** 2 for k in range(3))
    return q <= 1.0


def _crescent(grid, center, radii, thickness):
    # lateral half of an ellipsoidal shell; the open side faces -x (medial)
    inner = [max(r - thickness, 0.5) for r in radii]
    shell = _ellipsoid(grid, center, radii) & ~_ellipsoid(grid, center, inner)
    return shell & (grid[0] >= center[0])


def _fit_scale(make, target, lo=0.5, hi=40.0, iters=40):
    """Bisection on a scale factor so that ``make(scale).sum()`` is close to ``target``."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if make(mid).sum() < target:
            lo = mid
        else:
            hi = mid
    a, b = make(lo), make(hi)
    return (lo, a) if abs(a.sum() - target) <= abs(b.sum() - target) else (hi, b)


def _fits(mask, shape, margin=1):
    idx = np.argwhere(mask)
    if idx.size == 0:
        return False
    return bool((idx.min(0) >= margin).all() and (idx.max(0) <= np.array(shape) - 1 - margin).all())


def min_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest Euclidean voxel-centre distance between two masks, minus one."""
    if not a.any() or not b.any():
        return float("inf")
    dist = ndimage.distance_transform_edt(~a)
    return float(dist[b].min()) - 1.0


def _attempt(cfg: PhantomConfig, rng: np.random.Generator, shift):
    shape = cfg.volume_shape
    grid = _grid(shape)
    center = np.array(shape, dtype=np.float64) / 2.0 - 0.5 + shift

    dent_target = cfg.dentate_volume_voxels * rng.uniform(0.95, 1.05)
    aspect = np.array([1.0, 0.8, 0.65]) * rng.uniform(0.93, 1.07, size=3)
    thickness_frac = rng.uniform(0.38, 0.45)
    _, dentate = _fit_scale(
        lambda s: _crescent(grid, center, s * aspect, thickness_frac * s * aspect.min()), dent_target
    )
    if not _fits(dentate, shape):
        raise PhantomConfigError(
            f"dentate analog of {cfg.dentate_volume_voxels} voxels does not fit in {shape}"
        )

    int_target = dentate.sum() / cfg.imbalance_ratio * rng.uniform(0.96, 1.04)
    int_aspect = np.array([1.0, 0.85, 0.9]) * rng.uniform(0.93, 1.07, size=3)
    # medial-anterior approach direction
    direction = np.array([-1.0, 0.7, 0.0]) + rng.uniform(-0.15, 0.15, size=3)
    direction /= np.linalg.norm(direction)
    scale, _ = _fit_scale(lambda s: _ellipsoid(grid, center, s * int_aspect), int_target, hi=20.0)
    radii = scale * int_aspect

    dent_dist = ndimage.distance_transform_edt(~dentate)
    t = float(max(shape))
    interposed = None
    while t > 0:
        c = center + t * direction
        blob = _ellipsoid(grid, c, radii)
        if blob.any():
            d = float(dent_dist[blob].min())
            if d <= 3.0:
                if d >= 2.0 and not (blob & dentate).any():
                    interposed = blob
                break
        t -= 0.25
    if interposed is None:
        return None
    if not _fits(interposed, shape):
        raise PhantomConfigError(f"interposed analog does not fit in {shape} with a 1-2 voxel gap")
    return dentate, interposed


def _place_confounders(cfg, rng, grid, labeled):
    shape = cfg.volume_shape
    clearance = ndimage.distance_transform_edt(~labeled)
    blobs = np.zeros(shape, dtype=bool)
    for k in range(cfg.confounder_count):
        for _ in range(500):
            r = rng.uniform(2.0, 3.5)
            c = np.array([rng.uniform(r + 1, s - r - 2) for s in shape])
            blob = _ellipsoid(grid, c, (r, r, r))
            if not blob.any():
                continue
            if clearance[blob].min() >= CONFOUNDER_CLEARANCE and not (
                ndimage.binary_dilation(blobs, iterations=2) & blob
            ).any():
                blobs |= blob
                break
        else:
            raise PhantomConfigError(
                f"cannot place confounder {k + 1} at >= {CONFOUNDER_CLEARANCE} voxels from the labels"
            )
    return blobs


def generate_phantom(config: PhantomConfig) -> PhantomCase:
    """Deterministic phantom for ``config``; a pure function of the config."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    shift = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=3)
    for _ in range(20):
        placed = _attempt(config, rng, shift)
        if placed is None:
            continue
        dentate, interposed = placed
        ratio = dentate.sum() / interposed.sum()
        if 0.8 * config.imbalance_ratio <= ratio <= 1.2 * config.imbalance_ratio:
            break
    else:
        raise PhantomConfigError(
            "could not place the interposed analog at a 1-2 voxel gap within the imbalance band"
        )

    labels = np.zeros(config.volume_shape, dtype=np.uint8)
    labels[dentate] = DENTATE
    labels[interposed] = INTERPOSED
    confounders = _place_confounders(config, rng, _grid(config.volume_shape), labels > 0)

    fg = config.bg_mean * (1.0 - config.contrast)
    image = np.full(config.volume_shape, config.bg_mean, dtype=np.float64)
    image[(labels > 0) | confounders] = fg
    if config.noise_sigma > 0:
        image += rng.normal(0.0, config.noise_sigma * config.bg_mean, size=image.shape)
    meta = {
        "seed": int(config.seed),
        "voxels": {"dentate": int(dentate.sum()), "interposed": int(interposed.sum())},
        "translation": [int(s) for s in shift],
        "gap": min_gap(dentate, interposed),
        "confounders": int(config.confounder_count),
    }
    return PhantomCase(image.astype(np.float32), labels, meta)


def generate_dataset(n: int, base_seed: int, config: PhantomConfig, out_dir, n_labeled=None) -> dict:
    """Write ``n`` phantoms plus ``manifest.json``; case ``i`` uses seed ``base_seed + i``.

    The first ``n_labeled`` cases (all by default) get label files; the rest
    are written image-only and flagged unlabeled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_labeled = n if n_labeled is None else n_labeled
    entries = []
    for i in range(n):
        seed = base_seed + i
        case = generate_phantom(PhantomConfig(**{**asdict(config), "seed": seed}))
        cid = f"case_{seed:05d}"
        image_name = f"{cid}_image.nii.gz"
        save_volume(out_dir / image_name, case.image, config.spacing_mm)
        label_name = None
        if i < n_labeled:
            label_name = f"{cid}_label.nii.gz"
            save_volume(out_dir / label_name, case.labels, config.spacing_mm)
        entries.append(
            {"id": cid, "image": image_name, "label": label_name, "seed": seed, "labeled": i < n_labeled}
        )
    cfg = asdict(config)
    cfg["volume_shape"] = list(config.volume_shape)
    write_manifest(out_dir / "manifest.json", entries, config.spacing_mm, phantom_config=cfg)
    return {"cases": entries, "spacing_mm": config.spacing_mm, "path": str(out_dir / "manifest.json")}
