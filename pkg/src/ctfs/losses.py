"""Supervised, reliability-gated unsupervised, and combined training losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_FLOOR = 1e-8


@dataclass(frozen=True)
class LossConfig:
    lambda_u: float = 1.0
    psi: float = 0.4
    soft_targets: bool = False

    def __post_init__(self):
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError("psi must be in [0, 1]")


@dataclass(frozen=True)
class LossReport:
    total: float
    sup: float
    unsup: float
    gated_fraction: float


def pixel_ce(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel cross-entropy from probabilities (N, C, H, W).

    ``target`` is either hard labels (N, H, W) or a soft distribution shaped
    like ``probs``. Probabilities are clamped to [1e-8, 1] before the log.
    """
    logp = probs.clamp(PROB_FLOOR, 1.0).log()
    if target.dim() == probs.dim():
        return -(target * logp).sum(dim=1)
    target = target.long()
    c = probs.shape[1]
    if target.numel() and (target.min() < 0 or target.max() >= c):
        raise ValueError(f"label index outside 0..{c - 1}")
    return -logp.gather(1, target.unsqueeze(1)).squeeze(1)


def supervised_loss(preds: torch.Tensor, gts: torch.Tensor) -> torch.Tensor:
    """Mean over images of the mean per-pixel cross-entropy."""
    if preds.shape[0] != gts.shape[0] or preds.shape[-2:] != gts.shape[-2:]:
        raise ValueError("predictions and labels are not aligned")
    return pixel_ce(preds, gts).flatten(1).mean(dim=1).mean()


def reliability_gate(reliability: torch.Tensor, psi: float) -> torch.Tensor:
    return (reliability > psi).to(reliability.dtype)


def unsupervised_loss(student_preds: torch.Tensor, pseudo_labels: torch.Tensor,
                      reliability: torch.Tensor, cfg: LossConfig = LossConfig()):
    """Reliability-weighted, gated CE against teacher pseudo-labels.

    The per-image sum is divided by the full pixel count, not by the number of
    pixels that pass the gate. Returns ``(loss, gated_fraction)``.
    """
    reliability = reliability.to(student_preds.dtype)
    if reliability.shape != student_preds.shape[:1] + student_preds.shape[2:]:
        raise ValueError("reliability map does not match the prediction grid")
    gate = reliability_gate(reliability, cfg.psi)
    ce = pixel_ce(student_preds, pseudo_labels)
    n_pix = ce.shape[-2] * ce.shape[-1]
    per_image = (ce * reliability * gate).flatten(1).sum(dim=1) / n_pix
    return per_image.mean(), float(gate.mean())


def total_loss(sup, unsup, cfg: LossConfig = LossConfig(), gated_fraction: float = 0.0):
    """``sup + lambda_u * unsup`` as a tensor, plus its :class:`LossReport`."""
    sup_t = torch.as_tensor(sup)
    unsup_t = torch.as_tensor(unsup)
    total = sup_t + cfg.lambda_u * unsup_t
    report = LossReport(float(total.detach()), float(sup_t.detach()), float(unsup_t.detach()),
                        float(gated_fraction))
    return total, report
