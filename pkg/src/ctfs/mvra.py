"""Multi-view reliability assessment of pseudo-labels.

Probability maps are channel-first: (..., C, H, W). Grid features keep the same
convention, (..., C, H/m, W/m), so every score below reduces over dim -3.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from . import TEACHER_TAGS
from .augment import TEACHER_KIND, AugmentConfig, stability_view
from .model import predict

EPS = 1e-12


@dataclass(frozen=True)
class MVRAConfig:
    grid: int = 32
    views: int = 2
    delta: float = 0.5


@dataclass
class ReliabilityMap:
    grid_scores: torch.Tensor    # (..., Gr, Gc)
    pixel_scores: torch.Tensor   # (..., H, W)
    stability: dict              # tag -> (..., Gr, Gc)
    consistency: torch.Tensor    # (..., Gr, Gc)
    penalty: torch.Tensor        # (..., Gr, Gc)


def grid_pool(prob: torch.Tensor, m: int) -> torch.Tensor:
    """Mean class-probability vector of every m x m cell."""
    h, w = prob.shape[-2:]
    if h % m or w % m:
        raise ValueError(f"image {h}x{w} is not divisible by grid size {m}")
    lead = prob.shape[:-2]
    return prob.reshape(*lead, h // m, m, w // m, m).mean(dim=(-3, -1))


def block_replicate(grid: torch.Tensor, m: int) -> torch.Tensor:
    return grid.repeat_interleave(m, dim=-2).repeat_interleave(m, dim=-1)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    num = (a * b).sum(dim=-3)
    den = a.norm(dim=-3) * b.norm(dim=-3)
    return (num / den.clamp_min(EPS)).clamp(0.0, 1.0)


def teacher_stability(original: torch.Tensor, views) -> torch.Tensor:
    """Mean cosine between the original-image grid features and each view's."""
    if len(views) == 0:
        raise ValueError("need at least one view")
    for v in views:
        if v.shape != original.shape:
            raise ValueError("views must be grid-aligned with the original")
    return torch.stack([cosine(original, v) for v in views]).mean(dim=0)


def cross_teacher_consistency(features) -> torch.Tensor:
    """Mean pairwise cosine over all unordered teacher pairs."""
    features = list(features)
    pairs = list(itertools.combinations(range(len(features)), 2))
    if not pairs:
        raise ValueError("need at least two teachers")
    return torch.stack([cosine(features[p], features[q]) for p, q in pairs]).mean(dim=0)


def consistency_penalty(consistency: torch.Tensor, delta: float) -> torch.Tensor:
    return delta + (1.0 - delta) * consistency


def fuse_reliability(stabilities, consistency: torch.Tensor, delta: float, m: int) -> ReliabilityMap:
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta}")
    if isinstance(stabilities, dict):
        stab_map = dict(stabilities)
    else:
        stab_map = dict(zip(TEACHER_TAGS, stabilities))
    mean_stab = torch.stack(list(stab_map.values())).mean(dim=0)
    if mean_stab.shape != consistency.shape:
        raise ValueError("stability and consistency grids differ in shape")
    penalty = consistency_penalty(consistency, delta)
    grid_scores = (penalty * mean_stab).clamp(0.0, 1.0)
    return ReliabilityMap(grid_scores, block_replicate(grid_scores, m), stab_map, consistency, penalty)


def make_stability_views(tag: str, img: np.ndarray, k: int, rng: np.random.Generator,
                         cfg: AugmentConfig = AugmentConfig()) -> list[np.ndarray]:
    kind = TEACHER_KIND[tag]
    return [stability_view(kind, img, rng, cfg) for _ in range(k)]


def assess(bank, images, cfg: MVRAConfig = MVRAConfig(), seed=None, rng=None,
           aug_cfg: AugmentConfig = AugmentConfig()) -> ReliabilityMap:
    """Reliability of every grid cell for a batch of unlabeled images.

    ``images`` is (N, H, W) (or a single (H, W) image). Each teacher predicts on
    the original plus ``cfg.views`` geometry-preserving views from its own
    perturbation family; all three teachers take part regardless of rotation.
    """
    imgs = np.asarray(images, dtype=np.float64)
    single = imgs.ndim == 2
    if single:
        imgs = imgs[None]
    h, w = imgs.shape[-2:]
    if h % cfg.grid or w % cfg.grid:
        raise ValueError(f"image {h}x{w} is not divisible by grid size {cfg.grid}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    n, k = len(imgs), cfg.views

    originals, stabilities = {}, {}
    for tag in TEACHER_TAGS:
        views = [make_stability_views(tag, im, k, rng, aug_cfg) for im in imgs]
        stack = np.concatenate([imgs, np.asarray(views).reshape(n * k, h, w)], axis=0)
        probs = predict(bank[tag], stack).double()
        feats = grid_pool(probs, cfg.grid)
        orig = feats[:n]
        view_feats = feats[n:].reshape(n, k, *feats.shape[1:]).unbind(dim=1)
        originals[tag] = orig
        stabilities[tag] = teacher_stability(orig, view_feats)

    consistency = cross_teacher_consistency([originals[t] for t in TEACHER_TAGS])
    rel = fuse_reliability(stabilities, consistency, cfg.delta, cfg.grid)
    if single:
        rel = ReliabilityMap(rel.grid_scores[0], rel.pixel_scores[0],
                             {t: s[0] for t, s in rel.stability.items()},
                             rel.consistency[0], rel.penalty[0])
    return rel
