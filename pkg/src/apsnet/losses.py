"""Cross-entropy, hinge-style supervised contrastive loss and their sum."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class ContrastiveConfig:
    kappa: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [-1, 1], got {self.kappa}")


@dataclass(frozen=True)
class PairMasks:
    positive: torch.Tensor
    negative: torch.Tensor


@dataclass
class LossBreakdown:
    ce_head1: float = 0.0
    ce_head2: float = 0.0
    ce_dc: float = 0.0
    ce_con: float = 0.0
    contrast: float = 0.0
    composite: float = 0.0


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax of the true class, computed max-shifted."""
    if not torch.isfinite(logits).all():
        raise ValueError("cross_entropy: non-finite logits")
    labels = torch.as_tensor(labels, device=logits.device).long()
    n = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels must lie in [0, {n})")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_z = shifted.exp().sum(1).log()
    return (log_z - shifted.gather(1, labels[:, None]).squeeze(1)).mean()


def pair_masks(labels: torch.Tensor) -> PairMasks:
    labels = torch.as_tensor(labels)
    pos = (labels[:, None] == labels[None, :]).float()
    return PairMasks(pos, 1.0 - pos)


def supervised_contrastive(
    reps: torch.Tensor,
    labels: torch.Tensor,
    cfg: ContrastiveConfig | float = ContrastiveConfig(),
    eps: float = 1e-12,
) -> torch.Tensor:
    """Pairwise cosine loss over all B² ordered pairs (diagonal included).

    Same-class pairs pay ``1 - cos``; different-class pairs pay
    ``max(cos - kappa, 0)``. The sum is divided by B².
    """
    kappa = cfg.kappa if isinstance(cfg, ContrastiveConfig) else float(cfg)
    z = reps / reps.norm(dim=1, keepdim=True).clamp_min(eps)
    cos = z @ z.T
    m = pair_masks(torch.as_tensor(labels, device=reps.device))
    pos = m.positive.to(reps.dtype)
    neg = m.negative.to(reps.dtype)
    b = reps.shape[0]
    return (pos * (1.0 - cos) + neg * torch.clamp(cos - kappa, min=0.0)).sum() / (b * b)


def composite(logits_dc, reps, labels, cfg: ContrastiveConfig | float = ContrastiveConfig()):
    """Return ``(ce, contrast, ce + contrast)`` as tensors."""
    ce = cross_entropy(logits_dc, labels)
    con = supervised_contrastive(reps, labels, cfg)
    return ce, con, ce + con
