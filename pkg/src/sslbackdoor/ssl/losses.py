"""Objective functions for the exemplar-based and pretext-task methods."""
from __future__ import annotations

import torch

from ..errors import ConfigError, ContractError

NORM_TOLERANCE = 1e-4


def check_unit(x: torch.Tensor, name: str, tol: float = NORM_TOLERANCE) -> None:
    if x.numel() == 0:
        return
    err = (x.detach().norm(dim=-1) - 1).abs().max().item()
    if not err <= tol:
        raise ContractError(f"{name} is not unit-normalised (max |norm - 1| = {err:.3g})")


def safe_normalize(x: torch.Tensor, name: str = "embedding", eps: float = 1e-12) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms <= eps).any():
        raise ContractError(f"{name} has zero norm and cannot be normalised")
    return x / norms


def info_nce_loss(q: torch.Tensor, k_pos: torch.Tensor, negatives: torch.Tensor, temperature: float) -> torch.Tensor:
    """Contrastive loss of a query against one positive key and a set of negatives.

    ``q`` and ``k_pos`` are (d,) or (B, d); ``negatives`` is (K, d) and shared by
    the batch. All inputs must be unit-normalised. Returns the batch mean of
    ``-log(exp(q.k/t) / (exp(q.k/t) + sum_i exp(q.n_i/t)))``.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    single = q.dim() == 1
    q, k_pos = q.reshape(-1, q.shape[-1]), k_pos.reshape(-1, k_pos.shape[-1])
    negatives = negatives.reshape(-1, q.shape[-1])
    for t, name in ((q, "query"), (k_pos, "positive key"), (negatives, "negatives")):
        check_unit(t, name)
    l_pos = (q * k_pos).sum(dim=1, keepdim=True)
    l_neg = q @ negatives.T
    logits = torch.cat([l_pos, l_neg], dim=1) / temperature
    loss = torch.logsumexp(logits, dim=1) - logits[:, 0]
    return loss[0] if single else loss.mean()


def byol_term(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample ``2 - 2 cos(prediction, target)``; both are normalised here."""
    p = safe_normalize(prediction, "prediction")
    z = safe_normalize(target, "target projection")
    return 2 - 2 * (p * z).sum(dim=-1)


def byol_loss(p1: torch.Tensor, z2: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor) -> torch.Tensor:
    # average, not sum, of the two directions
    return 0.5 * (byol_term(p1, z2).mean() + byol_term(p2, z1).mean())


def nearest_neighbors(u: torch.Tensor, bank: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Neighbour set of each target embedding: itself plus its k-1 most cosine-similar bank rows.

    Returns ``(neighbors, bank_indices)`` of shapes (B, k, d) and (B, k-1).
    """
    if k < 1:
        raise ConfigError(f"nn_count must be >= 1, got {k}")
    if k - 1 > bank.shape[0]:
        raise ConfigError(f"nn_count {k} exceeds memory bank occupancy {bank.shape[0]} + 1")
    sims = u @ bank.T
    idx = sims.topk(k - 1, dim=1).indices if k > 1 else sims.new_empty((u.shape[0], 0), dtype=torch.long)
    neighbors = torch.cat([u.unsqueeze(1), bank[idx]], dim=1)
    return neighbors, idx


def msf_loss(q: torch.Tensor, u: torch.Tensor, bank: torch.Tensor, k: int) -> torch.Tensor:
    """Mean squared distance of the online query to the k nearest neighbours of its target."""
    check_unit(q, "online query")
    check_unit(u, "target embedding")
    neighbors, _ = nearest_neighbors(u.detach(), bank, k)
    d2 = ((q.unsqueeze(1) - neighbors) ** 2).sum(dim=-1)
    return d2.mean(dim=1).mean()

