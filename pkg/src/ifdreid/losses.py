"""Training objectives: identity cross-entropy, the clothing contrastive loss
and the weighted total."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    tau: float = 0.1
    T: float = 0.5
    lam: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not self.T > 0:
            raise ValueError(f"incentive divisor T must be positive, got {self.T}")
        if not self.lam >= 0:
            raise ValueError(f"loss weight must be non-negative, got {self.lam}")


def id_loss(logits: torch.Tensor, identities: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of identity logits."""
    identities = torch.as_tensor(identities, dtype=torch.long, device=logits.device)
    if identities.numel() and (identities.min() < 0 or identities.max() >= logits.shape[1]):
        raise ValueError(f"identity labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, identities)


def pair_weights(identities: torch.Tensor, clothings: torch.Tensor, T: float) -> torch.Tensor:
    """w[i, p] = 1/T for same-identity pairs with different clothing, 1 otherwise."""
    same_cloth = clothings[:, None] == clothings[None, :]
    w = torch.ones(len(identities), len(identities), dtype=torch.float64)
    w[~same_cloth] = 1.0 / T
    return w


def clothing_contrastive_loss(
    features: torch.Tensor,
    identities: torch.Tensor,
    clothings: torch.Tensor,
    tau: float = 0.1,
    T: float = 0.5,
) -> torch.Tensor:
    """Supervised contrastive loss with clothing-dependent positive weights.

    For anchor i and positive p (same identity, p != i) the pair term is
    ``log(e^{s_ip} / (e^{s_ip} + sum_{j in N_i} e^{s_ij}))`` with
    ``s = f f^T / tau`` and N_i the samples of other identities. Positives in
    a different outfit than the anchor are weighted by 1/T. Terms are
    averaged over P_i, then over anchors with at least one positive.
    ``clothings`` must be globally unique appearance ids.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("clothing contrastive loss needs a non-empty batch")
    identities = torch.as_tensor(identities, device=features.device)
    clothings = torch.as_tensor(clothings, device=features.device)

    sim = features @ features.T / tau
    same_id = identities[:, None] == identities[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=features.device)
    pos = same_id & ~eye
    neg = ~same_id

    # log(e^a / (e^a + e^b)) = -softplus(b - a), b = logsumexp over negatives
    has_neg = neg.any(dim=1, keepdim=True)
    neg_logits = torch.where(has_neg, sim.masked_fill(~neg, float("-inf")), torch.zeros_like(sim))
    neg_lse = torch.logsumexp(neg_logits, dim=1, keepdim=True)
    neg_lse = torch.where(has_neg, neg_lse, torch.full_like(neg_lse, float("-inf")))
    log_ratio = -F.softplus(neg_lse - sim)

    w = pair_weights(identities, clothings, T).to(features.dtype).to(features.device)
    n_pos = pos.sum(dim=1)
    valid = n_pos > 0
    if not valid.any():
        return features.sum() * 0.0
    per_anchor = (w * log_ratio * pos).sum(dim=1)[valid] / n_pos[valid]
    return -per_anchor.mean()


def supcon_loss(features: torch.Tensor, identities: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """The same objective with every positive weighted 1."""
    return clothing_contrastive_loss(features, identities, torch.zeros_like(torch.as_tensor(identities)), tau, 1.0)


def total_loss(id_main, id_attn, ccl, config: LossConfig | None = None):
    lam = 1.0 if config is None else config.lam
    return id_main + id_attn + lam * ccl
