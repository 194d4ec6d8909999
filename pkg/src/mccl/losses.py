"""Simplified asymmetric classification loss.

Positive and negative terms are focused independently: the positive term
is down-weighted by (1-p)^gamma_pos (plain log-loss at gamma_pos = 0) and
the negative term by p^gamma_neg, which suppresses easy negatives. No
probability margin or clipping is applied.
"""

from __future__ import annotations

import torch

PROB_EPS = 1e-8


def asymmetric_loss(
    probs: torch.Tensor,
    targets: torch.Tensor,
    gamma_pos: float = 0.0,
    gamma_neg: float = 2.0,
) -> torch.Tensor:
    """Mean over all class slots of the asymmetric focal log-loss.

    ``probs`` are probabilities (not logits), clamped away from 0 and 1 so
    the logs stay finite.
    """
    probs = torch.as_tensor(probs)
    targets = torch.as_tensor(targets, dtype=probs.dtype)
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pos = targets * (1.0 - p) ** gamma_pos * torch.log(p)
    neg = (1.0 - targets) * p**gamma_neg * torch.log(1.0 - p)
    return -(pos + neg).mean()
