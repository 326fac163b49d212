"""Training objectives: per-head hybrid Tversky/Focal loss, attention CE, overlap penalty.

All probability tensors are laid out ``(B, C, *spatial)``.  Channel 0 is the
background class and channel 1 the structure of the head, i.e. the one-based
class indices 1 and 2 shifted to zero-based.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch


@dataclass
class LossConfig:
    alpha: float = 0.3
    beta: float = 0.7
    pi_t: float = 0.5
    pi_f: float = 0.5
    lambda_d: float = 1.0
    lambda_i: float = 1.0
    lambda_a: float = 0.5
    lambda_o: float = 0.1
    epsilon: float = 1e-7
    class_weights_d: Optional[Sequence[float]] = None
    class_weights_i: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0 < self.epsilon < 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3)")
        for w in (self.class_weights_d, self.class_weights_i):
            if w is not None and min(w) <= 0:
                raise ValueError("class weights must be positive")

    def to_dict(self):
        d = asdict(self)
        for k in ("class_weights_d", "class_weights_i"):
            if d[k] is not None:
                d[k] = [float(v) for v in d[k]]
        return d


def one_hot_encode(labels, classes: int = 2) -> torch.Tensor:
    """One-hot map for labels indexed ``1..classes``; ``(B, *S) -> (B, classes, *S)``."""
    lab = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels)
    bad = (lab < 1) | (lab > classes)
    if bad.any():
        voxel = tuple(int(v) for v in torch.nonzero(bad)[0])
        raise ValueError(f"label {int(lab[voxel])} at voxel {voxel} outside 1..{classes}")
    g = torch.nn.functional.one_hot(lab.long() - 1, classes)
    return g.movedim(-1, 1).to(torch.get_default_dtype())


def head_targets(labels, dtype=None) -> dict:
    """One-hot targets for the dentate head, interposed head and their union from a {0,1,2} map."""
    lab = torch.as_tensor(labels).long()
    out = {
        "dentate": one_hot_encode(1 + (lab == 1).long()),
        "interposed": one_hot_encode(1 + (lab == 2).long()),
        "union": one_hot_encode(1 + (lab > 0).long()),
        "joint": one_hot_encode(1 + lab, 3),
    }
    if dtype is not None:
        out = {k: v.to(dtype) for k, v in out.items()}
    return out


def class_weights(label_maps, head: str, floor: float = 1e-3) -> np.ndarray:
    """``w_c = 1 - f_c`` with ``f_c`` the pooled voxel fraction of class ``c``.

    Returns ``[w_background, w_structure]``.
    """
    if not label_maps:
        raise ValueError("class_weights needs at least one label map")
    cls = {"dentate": 1, "interposed": 2}[head]
    fg = sum(int((np.asarray(m) == cls).sum()) for m in label_maps)
    total = sum(int(np.asarray(m).size) for m in label_maps)
    if fg == 0:
        warnings.warn(f"{head} absent from all label maps; using weights (floor, 1)")
    frac = np.array([1.0 - fg / total, fg / total])
    return np.maximum(1.0 - frac, floor)


def _sum_spatial(x):
    return x.flatten(1).sum(1)


def tversky_loss(p, g, alpha: float = 0.3, beta: float = 0.7, eps: float = 1e-7) -> torch.Tensor:
    """Per-class Tversky losses ``[TL_bg, TL_fg]`` averaged over samples.

    ``alpha`` weighs ``sum p_other * g_c`` and ``beta`` weighs ``sum p_c * g_other``.
    A class absent from both ground truth and prediction scores a perfect ratio.
    """
    pc = p.clamp(eps, 1 - eps)
    out = []
    for c in (0, 1):
        o = 1 - c
        tp = _sum_spatial(pc[:, c] * g[:, c])
        miss = _sum_spatial(pc[:, o] * g[:, c])
        extra = _sum_spatial(pc[:, c] * g[:, o])
        den = tp + alpha * miss + beta * extra
        empty = (_sum_spatial(g[:, c]) == 0) & (p[:, c].flatten(1).amax(1) <= eps)
        perfect = empty | (den == 0)
        ratio = torch.where(perfect, torch.ones_like(den), tp / torch.where(perfect, torch.ones_like(den), den))
        out.append(1 - ratio.mean())
    return torch.stack(out)


def focal_loss(p, g, eps: float = 1e-7) -> torch.Tensor:
    """Per-class ``-(g - p)^2 log p`` averaged over samples and voxels."""
    pc = p.clamp(eps, 1 - eps)
    term = (g - pc) ** 2 * torch.log(pc)
    return -term.movedim(1, 0).flatten(1).mean(1)


def hybrid_loss(p, g, weights, pi_t=0.5, pi_f=0.5, alpha=0.3, beta=0.7, eps=1e-7) -> torch.Tensor:
    w = torch.as_tensor(weights, dtype=p.dtype)
    return (w * (pi_t * tversky_loss(p, g, alpha, beta, eps) + pi_f * focal_loss(p, g, eps))).sum()


def attention_loss(p_a, g_union, eps: float = 1e-7) -> torch.Tensor:
    """Categorical cross-entropy of the attention head against background vs any structure."""
    pc = p_a.clamp(eps, 1 - eps)
    return -(g_union * torch.log(pc)).sum(1).mean()


def overlap_loss(p_d, p_i) -> torch.Tensor:
    """Soft Dice between the two heads' foreground probabilities; 0 when both are empty."""
    a, b = p_d[:, 1], p_i[:, 1]
    num = 2 * _sum_spatial(a * b)
    den = _sum_spatial(a + b)
    zero = den == 0
    ratio = torch.where(zero, torch.zeros_like(den), num / torch.where(zero, torch.ones_like(den), den))
    return ratio.mean()


def multiclass_dice_loss(p, g) -> torch.Tensor:
    """Plain soft Dice loss averaged over all classes (including background) and samples."""
    dims = tuple(range(2, p.ndim))
    num = 2 * (p * g).sum(dims)
    den = (p + g).sum(dims)
    zero = den == 0
    dc = torch.where(zero, torch.ones_like(den), num / torch.where(zero, torch.ones_like(den), den))
    return 1 - dc.mean()


def total_loss(out, targets: dict, cfg: LossConfig, weights_d=None, weights_i=None):
    """Weighted sum of the four training terms and a float breakdown for logging.

    For a joint-head output the objective is the plain multi-class Dice loss.
    """
    if out.joint is not None:
        total = multiclass_dice_loss(out.joint, targets["joint"])
        return total, {"L_joint": total.item(), "total": total.item()}
    wd = cfg.class_weights_d if weights_d is None else weights_d
    wi = cfg.class_weights_i if weights_i is None else weights_i
    wd = (1.0, 1.0) if wd is None else wd
    wi = (1.0, 1.0) if wi is None else wi
    kw = dict(pi_t=cfg.pi_t, pi_f=cfg.pi_f, alpha=cfg.alpha, beta=cfg.beta, eps=cfg.epsilon)
    l_d = hybrid_loss(out.dentate, targets["dentate"], wd, **kw)
    l_i = hybrid_loss(out.interposed, targets["interposed"], wi, **kw)
    l_a = attention_loss(out.attention, targets["union"], cfg.epsilon)
    l_o = overlap_loss(out.dentate, out.interposed)
    total = cfg.lambda_d * l_d + cfg.lambda_i * l_i + cfg.lambda_a * l_a + cfg.lambda_o * l_o
    breakdown = {
        "L_D": l_d.item(),
        "L_I": l_i.item(),
        "L_A": l_a.item(),
        "L_O": l_o.item(),
        "total": total.item(),
    }
    return total, breakdown
