"""Prototype bank construction and persistence.

For every stage, the patches of samples positive for a class are pooled
(a multi-label sample contributes to every class it carries) and clustered
into that class's allocated number of prototypes. The per-stage bank is
the concatenation of per-class centroids in class-index order, so the
owner vector maps each prototype slot back to the class that seeded it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .allocation import AllocationPlan
from .data import Dataset
from .errors import ConfigError, DataError
from .kmeans import mini_batch_kmeans

logger = logging.getLogger(__name__)

BANK_MAGIC = b"\n---\n"
DEFAULT_EPSILON = 1e-8
DEFAULT_MASS_FLOOR = 1e-4


@dataclass
class PrototypeBank:
    """Per-stage prototype matrices with ownership bookkeeping."""

    stages: list[torch.Tensor]  # each (K, D_s), float32, no grad
    owner: np.ndarray  # (K,) class index that seeded each slot
    stage_indices: list[int]  # positions in the dataset's stage list
    epsilon: float = DEFAULT_EPSILON
    momentum: float = 0.99999
    version: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"prototype bank: momentum {self.momentum} outside [0, 1]")
        if self.epsilon <= 0:
            raise ConfigError("prototype bank: epsilon must be positive")
        for mat in self.stages:
            if not torch.isfinite(mat).all():
                raise ConfigError("prototype bank: non-finite prototypes")
            if mat.shape[0] != len(self.owner):
                raise ConfigError("prototype bank: owner length != prototype count")

    @property
    def total(self) -> int:
        return len(self.owner)

    def clone(self) -> "PrototypeBank":
        return PrototypeBank(
            stages=[m.clone() for m in self.stages],
            owner=self.owner.copy(),
            stage_indices=list(self.stage_indices),
            epsilon=self.epsilon,
            momentum=self.momentum,
            version=self.version,
        )


def _pool_class_patches(dataset: Dataset, cls: int, stage_idx: int) -> np.ndarray:
    chunks = [
        s.features_by_stage[stage_idx].patches
        for s in dataset.samples
        if s.labels[cls]
    ]
    if not chunks:
        return np.zeros((0, dataset.manifest.stage_shapes[stage_idx][2]), dtype=np.float64)
    return np.concatenate(chunks).astype(np.float64)


def build_prototype_bank(
    dataset: Dataset,
    plan: AllocationPlan,
    stage_indices: list[int] | None = None,
    seed: int = 0,
    kmeans_batch: int = 1024,
    kmeans_iters: int = 100,
    epsilon: float = DEFAULT_EPSILON,
    momentum: float = 0.99999,
) -> PrototypeBank:
    """Cluster per-class patch pools into the allocated prototype budgets."""
    manifest = dataset.manifest
    if plan.num_classes != manifest.num_classes:
        raise ConfigError(
            f"allocation plan has {plan.num_classes} classes, dataset has "
            f"{manifest.num_classes}"
        )
    if stage_indices is None:
        stage_indices = list(range(len(manifest.stage_shapes)))
    for idx in stage_indices:
        if not 0 <= idx < len(manifest.stage_shapes):
            raise ConfigError(f"stage index {idx} out of range")

    matrices = []
    for stage_idx in stage_indices:
        per_class = []
        for cls in range(manifest.num_classes):
            budget = int(plan.budgets[cls])
            points = _pool_class_patches(dataset, cls, stage_idx)
            if len(points) == 0:
                raise DataError(
                    f"class {cls} has no positive samples; cannot build prototypes"
                )
            if len(points) < budget:
                logger.warning(
                    "class %d stage %d: only %d patches for %d prototypes; "
                    "sampling with replacement",
                    cls,
                    stage_idx,
                    len(points),
                    budget,
                )
                rng = np.random.default_rng(np.random.SeedSequence((seed, stage_idx, cls, 7)))
                points = points[rng.integers(0, len(points), size=budget)]
            centroids = mini_batch_kmeans(
                points,
                budget,
                batch_size=kmeans_batch,
                iters=kmeans_iters,
                seed=np.random.SeedSequence((seed, stage_idx, cls)),
            )
            per_class.append(centroids)
        matrices.append(torch.from_numpy(np.concatenate(per_class).astype(np.float32)))

    return PrototypeBank(
        stages=matrices,
        owner=plan.owner_vector(),
        stage_indices=list(stage_indices),
        epsilon=epsilon,
        momentum=momentum,
    )


def save_bank(bank: PrototypeBank, path) -> None:
    """Text header, a separator line, then raw float32 matrices in order."""
    header_lines = [
        "version: 1",
        f"total: {bank.total}",
        f"stage_indices: {','.join(str(i) for i in bank.stage_indices)}",
        f"stage_dims: {','.join(str(m.shape[1]) for m in bank.stages)}",
        f"epsilon: {bank.epsilon!r}",
        f"momentum: {bank.momentum!r}",
        f"bank_version: {bank.version}",
        f"owner: {','.join(str(int(c)) for c in bank.owner)}",
    ]
    with open(path, "wb") as fh:
        fh.write("\n".join(header_lines).encode("utf-8"))
        fh.write(BANK_MAGIC)
        for mat in bank.stages:
            fh.write(mat.detach().to(torch.float32).numpy().astype("<f4").tobytes())


def load_bank(path) -> PrototypeBank:
    raw = open(path, "rb").read()
    sep = raw.find(BANK_MAGIC)
    if sep < 0:
        raise DataError(f"{path}: not a prototype bank file")
    fields: dict[str, str] = {}
    for line in raw[:sep].decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    try:
        total = int(fields["total"])
        stage_indices = [int(v) for v in fields["stage_indices"].split(",")]
        stage_dims = [int(v) for v in fields["stage_dims"].split(",")]
        owner = np.array([int(v) for v in fields["owner"].split(",")], dtype=np.int64)
        epsilon = float(fields["epsilon"])
        momentum = float(fields["momentum"])
        bank_version = int(fields["bank_version"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed bank header ({exc})") from exc

    blob = raw[sep + len(BANK_MAGIC) :]
    stages = []
    offset = 0
    for dim in stage_dims:
        nbytes = total * dim * 4
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: truncated prototype matrix")
        stages.append(
            torch.from_numpy(np.frombuffer(chunk, dtype="<f4").reshape(total, dim).copy())
        )
        offset += nbytes
    return PrototypeBank(
        stages=stages,
        owner=owner,
        stage_indices=stage_indices,
        epsilon=epsilon,
        momentum=momentum,
        version=bank_version,
    )
