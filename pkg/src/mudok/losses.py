"""Pre-training objectives: in-batch contrastive loss and the knowledge triple loss."""
from __future__ import annotations

import torch

from . import autodiff as ad


def contrastive_loss(h1: torch.Tensor, h2: torch.Tensor, tau: float) -> torch.Tensor:
    """Summed InfoNCE over a batch of paired views (B, d) using cosine / tau."""
    if h1.shape != h2.shape or h1.dim() != 2:
        raise ad.ShapeError(f"contrastive_loss: view shapes {tuple(h1.shape)} vs {tuple(h2.shape)}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    sim = ad.cosine_similarity(h1, h2) / tau
    return -(torch.diagonal(sim) - torch.logsumexp(sim, dim=1)).sum()


def triple_score(h: torch.Tensor, r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return ((h * r) * t).sum(-1)


def kg_triple_loss(
    heads: torch.Tensor,
    relations: torch.Tensor,
    tails: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    """Negative log-softmax of each true tail against the item's other valid tails.

    heads (B, d), relations (B, n, d), tails (B, n, d) encoded tail outputs,
    mask (B, n). Items with fewer than two valid tails contribute nothing.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    hr = heads[:, None, :] * relations  # B,n,d
    scores = hr @ tails.transpose(1, 2)  # B,n(j),n(k)
    scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
    usable = mask & (mask.sum(1, keepdim=True) >= 2)
    # rows j that are padding would be all -inf on some items; keep them finite
    safe = scores.masked_fill(~usable[:, :, None], 0.0)
    logp = torch.diagonal(safe, dim1=1, dim2=2) - torch.logsumexp(safe, dim=2)
    return -(logp * usable.to(logp.dtype)).sum()


def total_loss(l_con: torch.Tensor, l_kg: torch.Tensor, lam: float, use_con: bool = True) -> torch.Tensor:
    """Weighted sum; ``use_con=False`` drops the contrastive term entirely."""
    return l_con + lam * l_kg if use_con else lam * l_kg
