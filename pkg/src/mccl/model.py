"""End-to-end intent classifier.

Per selected stage, the raw patch grid feeds two parallel routes: the
original patches, and their prototype reconstruction from the online
clustering layer. Each route is projected to the model width and decoded
by its own label-query decoder stack (optionally shared). The final
queries of every route and stage are concatenated per class and projected
to one sigmoid probability per class.

Prototypes are deliberately not model parameters: they live in the
PrototypeBank and only change through momentum updates driven by the
training loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, ConvBackbone, extract_stages
from .clustering import AssignmentResult, reconstruct_feature_map, soft_assignment
from .data import MultiLabelSample
from .decoder import ClassifierHead, DecoderStack
from .errors import ConfigError
from .label_prior import LabelGCN, build_adjacency
from .prototypes import PrototypeBank

BRANCH_RECONSTRUCTED = "reconstructed"
BRANCH_ORIGINAL = "original"


def resolve_stage_indices(requested, num_stages: int) -> list[int]:
    """Normalize a stage selection (negatives allowed) against S stages.

    ``None`` selects the last two stages (or the only one).
    """
    if num_stages < 1:
        raise ConfigError("no stages available")
    if requested is None or len(requested) == 0:
        take = min(2, num_stages)
        return list(range(num_stages - take, num_stages))
    resolved = []
    for idx in requested:
        real = idx + num_stages if idx < 0 else idx
        if not 0 <= real < num_stages:
            raise ConfigError(f"stage index {idx} out of range for {num_stages} stages")
        resolved.append(real)
    if len(set(resolved)) != len(resolved):
        raise ConfigError(f"duplicate stage selection {requested}")
    return resolved


def collate_stage_features(
    samples: list[MultiLabelSample],
    stage_indices: list[int],
    dtype: torch.dtype = torch.float32,
) -> list[torch.Tensor]:
    """Stack per-sample patch grids into per-stage (B, P, D) tensors."""
    return [
        torch.from_numpy(
            np.stack([s.features_by_stage[idx].patches for s in samples])
        ).to(dtype)
        for idx in stage_indices
    ]


def collate_labels(samples: list[MultiLabelSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.labels for s in samples]).astype(np.float32))


@dataclass
class ModelOutput:
    probs: torch.Tensor  # (B, C)
    logits: torch.Tensor  # (B, C)
    stage_features: list[torch.Tensor]  # inputs per selected stage
    assignments: list[AssignmentResult | None]  # per selected stage


class IntentClassifier(nn.Module):
    """``stage_dims`` and ``memory_lens`` describe the selected stages, in
    the order given by ``stage_indices`` (positions in the backbone's full
    stage list). A bank, when present, must cover exactly those stages."""

    def __init__(
        self,
        num_classes: int,
        stage_dims: list[int],
        memory_lens: list[int],
        stage_indices: list[int],
        label_embeddings: torch.Tensor,
        bank: PrototypeBank | None,
        d_model: int = 128,
        num_heads: int = 4,
        decoder_layers: int = 2,
        ffn_factor: int = 4,
        tau: float = 0.1,
        use_reconstructed: bool = True,
        share_branch_weights: bool = False,
        backbone: ConvBackbone | None = None,
        backbone_config: BackboneConfig | None = None,
    ):
        super().__init__()
        if label_embeddings.shape[0] != num_classes:
            raise ConfigError(
                f"model: {label_embeddings.shape[0]} label embeddings for "
                f"{num_classes} classes"
            )
        if not (len(stage_dims) == len(memory_lens) == len(stage_indices)):
            raise ConfigError("model: stage_dims, memory_lens, stage_indices must align")
        self.num_classes = num_classes
        self.tau = tau
        self.use_reconstructed = use_reconstructed
        self.stage_indices = list(stage_indices)
        self.bank = None
        self.backbone = backbone
        self.backbone_config = backbone_config or BackboneConfig()
        if bank is not None:
            self.attach_bank(bank)

        self.register_buffer("label_embeddings", label_embeddings.clone())
        self.register_buffer("label_adjacency", build_adjacency(label_embeddings))
        self.gcn = LabelGCN(label_embeddings.shape[1], d_model, d_model)

        self.stage_projections = nn.ModuleList(
            nn.Linear(dim, d_model) for dim in stage_dims
        )

        self.branches = (
            (BRANCH_RECONSTRUCTED, BRANCH_ORIGINAL)
            if use_reconstructed
            else (BRANCH_ORIGINAL,)
        )
        stacks: list[DecoderStack] = []
        self._stack_index: dict[tuple[int, str], int] = {}
        for stage_pos, mem_len in enumerate(memory_lens):
            for branch in self.branches:
                if share_branch_weights and branch != self.branches[0]:
                    self._stack_index[(stage_pos, branch)] = self._stack_index[
                        (stage_pos, self.branches[0])
                    ]
                    continue
                stacks.append(
                    DecoderStack(
                        num_classes,
                        mem_len,
                        d_model,
                        num_heads,
                        decoder_layers,
                        ffn_factor,
                    )
                )
                self._stack_index[(stage_pos, branch)] = len(stacks) - 1
        self.stacks = nn.ModuleList(stacks)
        self.head = ClassifierHead(
            num_classes, len(self.branches) * len(memory_lens) * d_model
        )
        self.init_queries_from_prior()

    def attach_bank(self, bank: PrototypeBank) -> None:
        """Bind a prototype bank; it must cover exactly this model's stages."""
        if list(bank.stage_indices) != list(self.stage_indices):
            raise ConfigError(
                f"model: bank covers stages {bank.stage_indices}, "
                f"model uses {self.stage_indices}"
            )
        self.bank = bank

    @torch.no_grad()
    def init_queries_from_prior(self) -> None:
        """Copy GCN-refined label embeddings into every stack's queries."""
        refined = self.gcn(self.label_embeddings, self.label_adjacency)
        for stack in self.stacks:
            stack.queries.copy_(refined)

    def _stack(self, stage_pos: int, branch: str) -> DecoderStack:
        return self.stacks[self._stack_index[(stage_pos, branch)]]

    def forward(self, features_by_stage: list[torch.Tensor]) -> ModelOutput:
        """``features_by_stage`` is the full stage list (all dataset stages
        in passthrough mode, the single raw grid in conv mode); the model
        applies its own stage selection."""
        if self.use_reconstructed and self.bank is None:
            raise ConfigError("model: reconstructed route requires a prototype bank")
        all_stages = extract_stages(features_by_stage, self.backbone_config, self.backbone)
        stages = [all_stages[i] for i in self.stage_indices]
        per_class_parts = []
        assignments: list[AssignmentResult | None] = []
        for stage_pos, feats in enumerate(stages):
            proj = self.stage_projections[stage_pos]
            if self.use_reconstructed:
                assignment = soft_assignment(feats, self.bank, stage_pos, self.tau)
                recon = reconstruct_feature_map(assignment, self.bank, stage_pos)
                assignments.append(assignment)
                rec_memory = proj(recon.normalized)
                per_class_parts.append(
                    self._stack(stage_pos, BRANCH_RECONSTRUCTED)(rec_memory)
                )
            else:
                assignments.append(None)
            orig_memory = proj(feats)
            per_class_parts.append(self._stack(stage_pos, BRANCH_ORIGINAL)(orig_memory))

        concatenated = torch.cat(per_class_parts, dim=-1)  # (B, C, branches*S*D)
        logits = self.head(concatenated)
        return ModelOutput(
            probs=torch.sigmoid(logits),
            logits=logits,
            stage_features=stages,
            assignments=assignments,
        )
