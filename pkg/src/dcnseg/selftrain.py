"""Semi-supervised training on unlabeled volumes.

Two strategies: pseudo-label pre-training followed by fine-tuning on manual
labels, and distillation where an odd-sized ensemble votes auxiliary labels
that are added to the manual set for retraining.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .io import Case, save_volume, write_manifest
from .metrics import STRUCTURES
from .network import DCNNet
from .trainer import TrainConfig, _labeled, infer_volume, reference_set, train

STRATEGIES = ("pretrain_finetune", "distillation")


@dataclass
class SelfTrainConfig:
    strategy: str = "distillation"
    n_models: int = 5
    qc_volume_band_sigma: float = 3.0
    qc_component_fraction: float = 0.9
    pretrain_epochs: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.n_models < 3 or self.n_models % 2 == 0:
            raise ValueError(f"n_models must be odd and >= 3, got {self.n_models}")
        if self.qc_volume_band_sigma <= 0:
            raise ValueError("qc_volume_band_sigma must be positive")
        if not 0 < self.qc_component_fraction <= 1:
            raise ValueError("qc_component_fraction must lie in (0, 1]")
        if self.pretrain_epochs < 1:
            raise ValueError("pretrain_epochs must be positive")

    def to_dict(self):
        return asdict(self)


# -- quality control ----------------------------------------------------------

def volume_stats(cases) -> dict:
    """Per-structure voxel-count mean and population std over labeled cases."""
    cases = _labeled(cases)
    out = {}
    for label, name in STRUCTURES.items():
        counts = np.array([(c.labels == label).sum() for c in cases], dtype=np.float64)
        out[name] = {"mean": float(counts.mean()), "std": float(counts.std())}
    return out


def largest_component_fraction(mask: np.ndarray) -> float:
    lab, n = ndimage.label(mask)
    if n == 0:
        return 0.0
    sizes = np.bincount(lab.ravel())[1:]
    return float(sizes.max() / sizes.sum())


def quality_check(labels: np.ndarray, stats: dict, cfg: SelfTrainConfig) -> Optional[str]:
    """Return ``None`` when the label map passes, else the first violated rule."""
    for label, name in STRUCTURES.items():
        mask = labels == label
        n = int(mask.sum())
        if n == 0:
            return f"empty structure: {name}"
        frac = largest_component_fraction(mask)
        if frac < cfg.qc_component_fraction:
            return f"fragmented structure: {name} largest component holds {frac:.3f}"
        mean, std = stats[name]["mean"], stats[name]["std"]
        if abs(n - mean) > cfg.qc_volume_band_sigma * std:
            return f"volume out of band: {name} {n} voxels vs {mean:.1f} +/- {cfg.qc_volume_band_sigma}*{std:.1f}"
    return None


@dataclass
class PseudoLabel:
    case_id: str
    labels: np.ndarray
    reason: Optional[str] = None

    @property
    def accepted(self) -> bool:
        return self.reason is None


@dataclass
class PseudoLabelSet:
    items: list = field(default_factory=list)

    @property
    def accepted(self) -> list:
        return [p for p in self.items if p.accepted]

    def summary(self) -> dict:
        return {
            "total": len(self.items),
            "accepted": len(self.accepted),
            "verdicts": {p.case_id: p.reason or "accepted" for p in self.items},
        }


def _as_auxiliary(case: Case, labels: np.ndarray) -> Case:
    return replace(case, labels=labels.astype(np.uint8), labeled=True, auxiliary=True)


def generate_pseudo_labels(
    model: DCNNet, unlabeled, labeled_stats: dict, train_cfg: TrainConfig, references, cfg: SelfTrainConfig
) -> PseudoLabelSet:
    if not unlabeled:
        raise ValueError("generate_pseudo_labels needs at least one unlabeled case")
    refs = reference_set(references, train_cfg)
    out = PseudoLabelSet()
    for c in unlabeled:
        labels = infer_volume(model, c.image, refs, train_cfg).labels
        out.items.append(PseudoLabel(c.id, labels, quality_check(labels, labeled_stats, cfg)))
    return out


# -- fusion -------------------------------------------------------------------

def majority_vote(label_maps) -> np.ndarray:
    """Strict-majority fusion, each structure voted independently.

    A voxel won by both structures goes to the one with more votes, dentate on ties.
    """
    maps = [np.asarray(m) for m in label_maps]
    if not maps:
        raise ValueError("majority_vote needs at least one label map")
    if len(maps) % 2 == 0:
        raise ValueError(f"majority_vote needs an odd number of maps, got {len(maps)}")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError(f"label map shape {m.shape} differs from {shape}")
    need = math.ceil(len(maps) / 2)
    votes_d = sum((m == 1).astype(np.int32) for m in maps)
    votes_i = sum((m == 2).astype(np.int32) for m in maps)
    win_d, win_i = votes_d >= need, votes_i >= need
    fused = np.zeros(shape, dtype=np.uint8)
    fused[win_d] = 1
    fused[win_i & (~win_d | (votes_i > votes_d))] = 2
    return fused


def write_auxiliary(out_dir, cases, spacing_mm: float) -> Path:
    """Write auxiliary-labeled cases as NIfTI pairs plus a manifest flagging ``auxiliary``."""
    out_dir = Path(out_dir)
    entries = []
    for c in cases:
        image_name, label_name = f"{c.id}_image.nii.gz", f"{c.id}_auxlabel.nii.gz"
        save_volume(out_dir / image_name, c.image, c.spacing_mm)
        save_volume(out_dir / label_name, c.labels, c.spacing_mm)
        entries.append(
            {"id": c.id, "image": image_name, "label": label_name, "seed": c.seed, "labeled": True, "auxiliary": True}
        )
    return write_manifest(out_dir / "manifest.json", entries, spacing_mm)


# -- strategies ---------------------------------------------------------------

@dataclass
class SelfTrainResult:
    model: DCNNet
    baseline: Optional[DCNNet] = None
    histories: dict = field(default_factory=dict)
    pseudo: Optional[PseudoLabelSet] = None
    constituents: list = field(default_factory=list)
    auxiliary: list = field(default_factory=list)
    fell_back: bool = False

    def summary(self) -> dict:
        return {
            "histories": {k: h.to_dict() for k, h in self.histories.items()},
            "pseudo_labels": self.pseudo.summary() if self.pseudo else None,
            "n_constituents": len(self.constituents),
            "auxiliary_cases": [c.id for c in self.auxiliary],
            "fell_back": self.fell_back,
        }


def run_pretrain_finetune(
    labeled, unlabeled, train_cfg: TrainConfig, cfg: SelfTrainConfig, baseline: Optional[DCNNet] = None
) -> SelfTrainResult:
    """Baseline, QC-gated pseudo labels, pre-training on them, then fine-tuning on manual labels."""
    labeled = _labeled(labeled)
    histories = {}
    if baseline is None:
        baseline, histories["baseline"] = train(labeled, replace(train_cfg, seed=cfg.seed))
    pseudo = generate_pseudo_labels(baseline, unlabeled, volume_stats(labeled), train_cfg, labeled, cfg)
    by_id = {c.id: c for c in unlabeled}
    aux = [_as_auxiliary(by_id[p.case_id], p.labels) for p in pseudo.accepted]
    if not aux:
        warnings.warn("no pseudo label passed quality control; returning the baseline model")
        return SelfTrainResult(baseline, baseline, histories, pseudo, fell_back=True)

    pre_cfg = replace(
        train_cfg,
        seed=cfg.seed,
        max_epochs=cfg.pretrain_epochs,
        early_stop_patience_epochs=min(train_cfg.early_stop_patience_epochs, cfg.pretrain_epochs),
    )
    # a single accepted case cannot be split, so validate on the manual labels instead
    val = labeled if len(aux) < 2 else None
    model, histories["pretrain"] = train(aux, pre_cfg, val_cases=val)
    model, histories["finetune"] = train(labeled, replace(train_cfg, seed=cfg.seed), model=model)
    return SelfTrainResult(model, baseline, histories, pseudo, auxiliary=aux)


def run_distillation(
    labeled, unlabeled, train_cfg: TrainConfig, cfg: SelfTrainConfig, constituents: Optional[list] = None
) -> SelfTrainResult:
    """Vote auxiliary labels with ``n_models`` differently seeded models and retrain on the union.

    ``constituents`` may supply already trained models (seeds ``seed+1..seed+N``).
    """
    labeled = _labeled(labeled)
    if not unlabeled:
        raise ValueError("distillation needs at least one unlabeled case")
    histories = {}
    if constituents is None:
        constituents = []
        for k in range(1, cfg.n_models + 1):
            m, histories[f"constituent_{k}"] = train(labeled, replace(train_cfg, seed=cfg.seed + k))
            constituents.append(m)
    elif len(constituents) != cfg.n_models:
        raise ValueError(f"expected {cfg.n_models} constituent models, got {len(constituents)}")

    refs = reference_set(labeled, train_cfg)
    aux = []
    for c in unlabeled:
        fused = majority_vote([infer_volume(m, c.image, refs, train_cfg).labels for m in constituents])
        if not fused.any():
            warnings.warn(f"{c.id}: fused label is empty; case left out of retraining")
            continue
        aux.append(_as_auxiliary(c, fused))

    model, histories["distilled"] = train(labeled + aux, replace(train_cfg, seed=cfg.seed))
    return SelfTrainResult(model, None, histories, constituents=constituents, auxiliary=aux)


def run_selftrain(labeled, unlabeled, train_cfg: TrainConfig, cfg: SelfTrainConfig) -> SelfTrainResult:
    if cfg.strategy == "pretrain_finetune":
        return run_pretrain_finetune(labeled, unlabeled, train_cfg, cfg)
    return run_distillation(labeled, unlabeled, train_cfg, cfg)
