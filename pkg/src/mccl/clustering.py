"""Differentiable online clustering over a prototype bank.

Patches are softly assigned to prototypes by temperature-scaled cosine
similarity, re-expressed as the assignment-weighted convex combination of
prototypes, and pooled. Prototypes never receive gradients: they evolve
only through an exponential moving average toward the patches assigned to
them, applied outside the autograd graph once per training step.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .prototypes import DEFAULT_MASS_FLOOR, PrototypeBank


@dataclass
class AssignmentResult:
    """Soft patch-to-prototype assignment for one stage.

    ``weights`` rows lie on the probability simplex; ``similarities`` are
    the underlying cosine values in [-1, 1].
    """

    weights: torch.Tensor  # (..., P, K)
    similarities: torch.Tensor  # (..., P, K)
    temperature: float


@dataclass
class ReconstructedFeature:
    """Convex-combination re-expression of a patch grid.

    ``patches`` is the raw combination (inside the prototypes' convex
    hull); ``normalized`` is its per-patch unit-norm version; ``pooled``
    is the mean of the normalized patches.
    """

    patches: torch.Tensor  # (..., P, D)
    normalized: torch.Tensor  # (..., P, D)
    pooled: torch.Tensor  # (..., D)


def _check_stage(bank: PrototypeBank, stage: int, width: int) -> torch.Tensor:
    if not 0 <= stage < len(bank.stages):
        raise ConfigError(f"clustering: bank has no stage {stage}")
    prototypes = bank.stages[stage]
    if prototypes.shape[1] != width:
        raise ConfigError(
            f"clustering: feature width {width} does not match bank stage "
            f"width {prototypes.shape[1]}"
        )
    return prototypes


def soft_assignment(
    features: torch.Tensor, bank: PrototypeBank, stage: int, tau: float
) -> AssignmentResult:
    """Cosine-similarity soft assignment of patches to prototypes.

    ``features`` is (..., P, D); gradients flow to it through the weights,
    while prototypes are detached. The epsilon in the norm product keeps
    zero-norm patches finite.
    """
    if tau <= 0:
        raise ConfigError(f"clustering: temperature {tau} must be positive")
    prototypes = _check_stage(bank, stage, features.shape[-1]).detach()
    prototypes = prototypes.to(features.dtype)

    patch_norms = features.norm(dim=-1, keepdim=True)  # (..., P, 1)
    proto_norms = prototypes.norm(dim=-1)  # (K,)
    sims = (features @ prototypes.T) / (patch_norms * proto_norms + bank.epsilon)
    weights = F.softmax(sims / tau, dim=-1)
    return AssignmentResult(weights=weights, similarities=sims, temperature=tau)


def reconstruct_feature_map(
    assignment: AssignmentResult, bank: PrototypeBank, stage: int
) -> ReconstructedFeature:
    """Assignment-weighted prototype combination, normalized and pooled."""
    prototypes = bank.stages[stage].detach().to(assignment.weights.dtype)
    patches = assignment.weights @ prototypes
    normalized = F.normalize(patches, dim=-1)
    pooled = normalized.mean(dim=-2)
    return ReconstructedFeature(patches=patches, normalized=normalized, pooled=pooled)


@torch.no_grad()
def momentum_update(
    bank: PrototypeBank,
    features: torch.Tensor,
    assignment: AssignmentResult,
    stage: int,
    momentum: float,
    mass_floor: float = DEFAULT_MASS_FLOOR,
) -> None:
    """Blend prototypes toward their soft-assignment-weighted patch means.

    Prototypes whose accumulated assignment mass stays at or below
    ``mass_floor`` are left untouched; ``momentum`` 1.0 is a strict no-op
    on the matrices. The version counter records every call.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"clustering: momentum {momentum} outside [0, 1]")
    prototypes = _check_stage(bank, stage, features.shape[-1])
    bank.version += 1
    if momentum == 1.0:
        return

    weights = assignment.weights.detach().reshape(-1, prototypes.shape[0])
    flat = features.detach().reshape(-1, features.shape[-1])
    weights = weights.to(prototypes.dtype)
    flat = flat.to(prototypes.dtype)

    mass = weights.sum(dim=0)  # (K,)
    active = mass > mass_floor
    if not bool(active.any()):
        return
    targets = (weights.T[active] @ flat) / mass[active].unsqueeze(1)
    prototypes[active] = momentum * prototypes[active] + (1.0 - momentum) * targets


def forward_stage(
    features: torch.Tensor,
    bank: PrototypeBank,
    stage: int,
    tau: float,
    momentum: float | None = None,
    training: bool = False,
    mass_floor: float = DEFAULT_MASS_FLOOR,
) -> tuple[ReconstructedFeature, AssignmentResult]:
    """Assignment + reconstruction; in training mode the bank is EMA-updated
    afterwards, so the returned tensors reflect the pre-update bank."""
    assignment = soft_assignment(features, bank, stage, tau)
    recon = reconstruct_feature_map(assignment, bank, stage)
    if training:
        momentum_update(
            bank,
            features,
            assignment,
            stage,
            bank.momentum if momentum is None else momentum,
            mass_floor=mass_floor,
        )
    return recon, assignment
