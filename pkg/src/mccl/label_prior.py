"""Label-side prior knowledge: embeddings, correlation graph, and the GCN.

Label description embeddings normally come from a precomputed file (one
row per label, manifest order). Without a file, a deterministic fallback
derives a unit vector from each label string via a hashed seed, stable
across runs and platforms. Correlations between embeddings define a
row-stochastic adjacency over labels, and two stacked graph convolutions
refine the embeddings into the vectors used to initialize decoder queries.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import DataError

LEAKY_SLOPE = 0.2


def fallback_embedding(label: str, dim: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector seeded by the label text."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def load_label_embeddings(
    label_names: list[str], dim: int, path: str | Path | None = None
) -> torch.Tensor:
    """C x D embedding matrix from file, or the hashed fallback."""
    if path is None:
        rows = np.stack([fallback_embedding(name, dim) for name in label_names])
        return torch.from_numpy(rows.astype(np.float32))

    lines = [
        line
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    ]
    if not lines:
        raise DataError(f"{path}: empty embedding file")
    header = lines[0].split()
    if len(header) != 2:
        raise DataError(f"{path}: header must be 'num_labels dim'")
    n_rows, file_dim = int(header[0]), int(header[1])
    if n_rows != len(label_names):
        raise DataError(
            f"{path}: file has {n_rows} rows for {len(label_names)} labels"
        )
    if len(lines) - 1 != n_rows:
        raise DataError(f"{path}: header says {n_rows} rows, found {len(lines) - 1}")
    rows = []
    for i, line in enumerate(lines[1:], start=1):
        values = np.array([float(v) for v in line.split()], dtype=np.float64)
        if len(values) != file_dim:
            raise DataError(f"{path}: row {i} has {len(values)} values, expected {file_dim}")
        rows.append(values)
    matrix = np.stack(rows)
    if not np.isfinite(matrix).all():
        raise DataError(f"{path}: non-finite embedding values")
    return torch.from_numpy(matrix.astype(np.float32))


def save_label_embeddings(embeddings: torch.Tensor, path: str | Path) -> None:
    rows = embeddings.detach().cpu().numpy()
    lines = [f"{rows.shape[0]} {rows.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_adjacency(embeddings: torch.Tensor) -> torch.Tensor:
    """Row-stochastic label graph from non-negative embedding correlations.

    Cosine similarities clipped below at zero, unit diagonal, rows
    normalized to sum to one.
    """
    if embeddings.shape[0] < 2:
        raise DataError("adjacency: need at least 2 labels")
    norms = embeddings.norm(dim=1)
    if bool((norms == 0).any()):
        raise DataError("adjacency: zero-norm label embedding")
    unit = embeddings / norms.unsqueeze(1)
    sims = (unit @ unit.T).clamp(min=0.0)
    sims.fill_diagonal_(1.0)
    return sims / sims.sum(dim=1, keepdim=True)


def gcn_forward(
    embeddings: torch.Tensor,
    adjacency: torch.Tensor,
    w1: torch.Tensor,
    w2: torch.Tensor,
) -> torch.Tensor:
    """Two stacked graph convolutions: act(A E W1), then A H W2."""
    if adjacency.shape[0] != adjacency.shape[1] or adjacency.shape[0] != embeddings.shape[0]:
        raise DataError(
            f"gcn: adjacency {tuple(adjacency.shape)} incompatible with "
            f"embeddings {tuple(embeddings.shape)}"
        )
    hidden = torch.nn.functional.leaky_relu(adjacency @ embeddings @ w1, LEAKY_SLOPE)
    return adjacency @ hidden @ w2


class LabelGCN(nn.Module):
    """Parameter container for the two-layer label graph convolution."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(in_dim, hidden_dim))
        self.w2 = nn.Parameter(torch.empty(hidden_dim, out_dim))
        nn.init.xavier_uniform_(self.w1)
        nn.init.xavier_uniform_(self.w2)

    def forward(self, embeddings: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        return gcn_forward(embeddings, adjacency, self.w1, self.w2)
