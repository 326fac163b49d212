"""Patch-based training with early stopping, whole-volume inference, k-fold cross-validation."""

from __future__ import annotations

import copy
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch

from . import losses as L
from .io import Case, load_cases
from .metrics import evaluate_case
from .network import DCNNet, ModelConfig, build_model
from .patches import (
    BoundingBox,
    extract_patches,
    label_box,
    localize_roi,
    make_patch_grid,
    reconstruct_probability,
)

ABLATIONS = ("full", "no_attention", "no_overlap", "joint_head_dice")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 50
    early_stop_patience_epochs: int = 20
    min_delta: float = 0.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    patch_size: tuple = (32, 32, 32)
    patch_step: tuple = (5, 5, 5)
    inference_step: Optional[tuple] = None
    roi_margin: int = 5
    val_fraction: float = 0.2
    seed: int = 0
    ablation: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_config: L.LossConfig = field(default_factory=L.LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss_config, dict):
            self.loss_config = L.LossConfig(**self.loss_config)
        self.patch_size = tuple(int(v) for v in self.patch_size)
        self.patch_step = tuple(int(v) for v in self.patch_step)
        if self.inference_step is not None:
            self.inference_step = tuple(int(v) for v in self.inference_step)
        self.adam_betas = tuple(float(v) for v in self.adam_betas)
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.early_stop_patience_epochs > self.max_epochs:
            raise ValueError("early_stop_patience_epochs must not exceed max_epochs")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["loss_config"] = self.loss_config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def effective_loss(self) -> L.LossConfig:
        lc = self.loss_config
        if self.ablation == "no_attention":
            lc = replace(lc, lambda_a=0.0)
        elif self.ablation == "no_overlap":
            lc = replace(lc, lambda_o=0.0)
        return lc

    def model_config(self) -> ModelConfig:
        return replace(self.model, seed=self.seed, joint_head=self.ablation == "joint_head_dice")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    wall_seconds: float = 0.0
    split: dict = field(default_factory=dict)

    @property
    def best_val(self):
        return self.epochs[self.best_epoch - 1]["val_total"]

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


# -- data ---------------------------------------------------------------------

def normalize_image(image: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance intensities over the whole volume."""
    img = np.asarray(image, dtype=np.float64)
    std = img.std()
    return ((img - img.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


def case_roi(case: Case, cfg: TrainConfig) -> BoundingBox:
    return label_box(case.labels, cfg.roi_margin, cfg.patch_size)


def patch_arrays(cases, cfg: TrainConfig, step=None):
    """Stacked image patches ``(N, 1, *P)`` and label patches ``(N, *P)`` over each case's ROI."""
    step = step or cfg.patch_step
    xs, ys = [], []
    for case in cases:
        roi = case_roi(case, cfg)
        grid = make_patch_grid(roi.shape, cfg.patch_size, step)
        img = normalize_image(case.image)
        xs += [p.data for p in extract_patches(img, roi, grid)]
        ys += [p.data for p in extract_patches(case.labels, roi, grid)]
    return np.stack(xs)[:, None], np.stack(ys).astype(np.int64)


def split_cases(n: int, val_fraction: float, rng: np.random.Generator):
    """Seeded case-level split; the fit share is ``ceil((1 - val_fraction) n)``, at least one val case."""
    perm = rng.permutation(n)
    n_fit = min(math.ceil((1 - val_fraction) * n), n - 1)
    return sorted(perm[:n_fit].tolist()), sorted(perm[n_fit:].tolist())


def _labeled(cases):
    if isinstance(cases, (str, Path, dict)):
        cases = load_cases(cases)
    cases = list(cases)
    missing = [c.id for c in cases if c.labels is None]
    if missing:
        raise ValueError(f"training needs labeled cases; unlabeled: {missing}")
    return cases


# -- training -----------------------------------------------------------------

def _batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def evaluate_loss(model: DCNNet, x, y, cfg: TrainConfig, weights_d, weights_i) -> dict:
    """Sample-weighted mean loss breakdown in inference mode."""
    model.eval()
    lc = cfg.effective_loss()
    sums, n = {}, 0
    with torch.no_grad():
        for idx in _batches(len(x), cfg.batch_size):
            out = model(torch.from_numpy(x[idx]))
            _, terms = L.total_loss(out, L.head_targets(y[idx]), lc, weights_d, weights_i)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            n += len(idx)
    return {k: v / n for k, v in sums.items()}


def train(cases, cfg: TrainConfig, model: Optional[DCNNet] = None, log_path=None, val_cases=None):
    """Train on labeled cases; returns ``(model, history)`` with the best-validation weights.

    Passing ``model`` continues training it (fine-tuning).  ``val_cases``
    overrides the seeded split.
    """
    cases = _labeled(cases)
    rng = np.random.default_rng(cfg.seed)
    if val_cases is None:
        if len(cases) < 2:
            raise ValueError("training needs at least 2 labeled cases (1 fit, 1 validation)")
        fit_idx, val_idx = split_cases(len(cases), cfg.val_fraction, rng)
        fit = [cases[i] for i in fit_idx]
        val = [cases[i] for i in val_idx]
    else:
        fit, val = cases, _labeled(val_cases)

    x_fit, y_fit = patch_arrays(fit, cfg)
    x_val, y_val = patch_arrays(val, cfg)
    lc = cfg.effective_loss()
    rois = [y for y in _roi_labels(fit, cfg)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        wd = lc.class_weights_d if lc.class_weights_d is not None else L.class_weights(rois, "dentate")
        wi = lc.class_weights_i if lc.class_weights_i is not None else L.class_weights(rois, "interposed")
    wd, wi = [float(v) for v in wd], [float(v) for v in wi]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if model is None:
            model = build_model(cfg.model_config())
        opt = torch.optim.Adam(
            model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps
        )
        history = TrainHistory(
            split={"fit": [c.id for c in fit], "val": [c.id for c in val], "weights_d": wd, "weights_i": wi}
        )
        log = open(log_path, "w") if log_path else None
        start = time.perf_counter()
        best_state, best_val = None, math.inf
        try:
            for epoch in range(1, cfg.max_epochs + 1):
                model.train()
                sums, n = {}, 0
                for step, idx in enumerate(_batches(len(x_fit), cfg.batch_size, rng.permutation(len(x_fit)))):
                    out = model(torch.from_numpy(x_fit[idx]))
                    loss, terms = L.total_loss(out, L.head_targets(y_fit[idx]), lc, wd, wi)
                    if not math.isfinite(terms["total"]):
                        raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}: {terms}")
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
                    for k, v in terms.items():
                        sums[k] = sums.get(k, 0.0) + v * len(idx)
                    n += len(idx)
                    if log:
                        log.write(json.dumps({"epoch": epoch, "step": step, **terms}) + "\n")
                train_terms = {k: v / n for k, v in sums.items()}
                val_terms = evaluate_loss(model, x_val, y_val, cfg, wd, wi)
                history.epochs.append(
                    {
                        "epoch": epoch,
                        "train_total": train_terms["total"],
                        "val_total": val_terms["total"],
                        "train_terms": train_terms,
                        "val_terms": val_terms,
                    }
                )
                if val_terms["total"] < best_val - cfg.min_delta:
                    best_val = val_terms["total"]
                    history.best_epoch = epoch
                    best_state = copy.deepcopy(model.state_dict())
                history.stopped_epoch = epoch
                if epoch - history.best_epoch >= cfg.early_stop_patience_epochs:
                    break
        finally:
            if log:
                log.close()
    model.load_state_dict(best_state)
    model.eval()
    history.wall_seconds = time.perf_counter() - start
    return model, history


def _roi_labels(cases, cfg):
    for c in cases:
        yield c.labels[case_roi(c, cfg).slices]


# -- inference ----------------------------------------------------------------

class InferenceResult(NamedTuple):
    labels: np.ndarray
    prob_dentate: np.ndarray  # (2, *volume)
    prob_interposed: np.ndarray
    roi: BoundingBox
    raw_overlap: int  # voxels claimed by both heads before resolution
    reference: int
    translation: tuple


def resolve_overlap(p_d: np.ndarray, p_i: np.ndarray) -> np.ndarray:
    """Threshold foreground maps at 0.5; doubly-claimed voxels go to the higher probability (ties: dentate)."""
    d, i = p_d > 0.5, p_i > 0.5
    labels = np.zeros(p_d.shape, dtype=np.uint8)
    labels[d] = 1
    labels[i & ~d] = 2
    labels[d & i & (p_i > p_d)] = 2
    return labels


def reference_set(cases, cfg: TrainConfig):
    return [(c.image, case_roi(c, cfg)) for c in _labeled(cases)]


def predict_patches(model: DCNNet, x: np.ndarray, batch_size: int = 8):
    """Foreground probabilities per head, each ``(N, *P)``."""
    model.eval()
    pd, pi = [], []
    with torch.no_grad():
        for idx in _batches(len(x), batch_size):
            out = model(torch.from_numpy(x[idx]))
            if out.joint is not None:
                pd.append(out.joint[:, 1].numpy())
                pi.append(out.joint[:, 2].numpy())
            else:
                pd.append(out.dentate[:, 1].numpy())
                pi.append(out.interposed[:, 1].numpy())
    return np.concatenate(pd), np.concatenate(pi)


def infer_volume(model: DCNNet, image: np.ndarray, references, cfg: TrainConfig) -> InferenceResult:
    """Localize the ROI, predict overlapping patches, average, threshold and resolve overlaps."""
    if not references:
        raise ValueError("infer_volume needs at least one labeled reference")
    if isinstance(references[0], Case):
        references = reference_set(references, cfg)
    roi, k, t = localize_roi(image, references, cfg.patch_size)
    grid = make_patch_grid(roi.shape, cfg.patch_size, cfg.inference_step or cfg.patch_step)
    x = np.stack([p.data for p in extract_patches(normalize_image(image), roi, grid)])[:, None]
    fd, fi = predict_patches(model, x, cfg.batch_size)
    rd = reconstruct_probability(list(fd), grid, roi.shape)
    ri = reconstruct_probability(list(fi), grid, roi.shape)

    full_d = np.zeros(image.shape, dtype=np.float32)
    full_i = np.zeros(image.shape, dtype=np.float32)
    full_d[roi.slices] = rd
    full_i[roi.slices] = ri
    labels = resolve_overlap(full_d, full_i)
    raw = int(((full_d > 0.5) & (full_i > 0.5)).sum())
    prob_d = np.stack([1 - full_d, full_d])
    prob_i = np.stack([1 - full_i, full_i])
    return InferenceResult(labels, prob_d, prob_i, roi, raw, k, tuple(int(v) for v in t))


# -- cross-validation ---------------------------------------------------------

def make_folds(n: int, folds: int, seed: int) -> list:
    if folds > n:
        raise ValueError(f"{folds} folds requested for {n} cases")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [sorted(f.tolist()) for f in np.array_split(perm, folds)]


@dataclass
class FoldResult:
    fold: int
    test_ids: list
    fit_ids: list
    val_ids: list
    reports: list
    history: TrainHistory


def cross_validate(cases, folds: int, cfg: TrainConfig, out_dir=None) -> list:
    """Train/test on each fold; every case is tested exactly once."""
    cases = _labeled(cases)
    results = []
    for f, test_idx in enumerate(make_folds(len(cases), folds, cfg.seed)):
        held = set(test_idx)
        test = [cases[i] for i in test_idx]
        train_set = [c for i, c in enumerate(cases) if i not in held]
        model, hist = train(train_set, cfg)
        refs = reference_set(train_set, cfg)
        reports = []
        for c in test:
            res = infer_volume(model, c.image, refs, cfg)
            reports.append(evaluate_case(res.labels, c.labels, c.spacing_mm, c.id))
        results.append(
            FoldResult(f, [c.id for c in test], hist.split["fit"], hist.split["val"], reports, hist)
        )
        if out_dir is not None:
            from .metrics import write_reports_json

            d = Path(out_dir) / f"fold_{f}"
            d.mkdir(parents=True, exist_ok=True)
            write_reports_json(d / "report.json", reports, {"fit": hist.split["fit"], "val": hist.split["val"]})
            hist.save(d / "history.json")
    return results
