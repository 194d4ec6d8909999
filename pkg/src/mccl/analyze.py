"""Prototype usage analysis.

Builds the prototype-category correlation matrix: entry (c, k) is the mean
assignment mass that patches of class-c-positive samples place on
prototype k, averaged over stages, with rows normalized. Also reports a
per-prototype usage histogram (total assignment mass) and flags prototypes
whose usage share is a negligible fraction of the uniform share.

Assignments depend only on the bank and the patch features, so analysis
needs no model parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .clustering import soft_assignment
from .data import Dataset
from .errors import DataError
from .model import collate_stage_features
from .prototypes import PrototypeBank

DEAD_FRACTION_OF_UNIFORM = 0.01


@dataclass
class AnalysisResult:
    correlation: np.ndarray  # (C, K), rows sum to 1
    usage: np.ndarray  # (K,) total assignment mass over all patches/stages
    per_batch_usage: list[tuple[int, int, np.ndarray]]  # (batch, stage_pos, mass)
    dead_prototypes: list[int]
    owner: np.ndarray  # (K,)

    def dominant_on_owner(self) -> float:
        """Fraction of classes whose correlation row peaks on an owned slot."""
        num_classes = self.correlation.shape[0]
        hits = 0
        for c in range(num_classes):
            k = int(np.argmax(self.correlation[c]))
            if self.owner[k] == c:
                hits += 1
        return hits / num_classes


def analyze_prototypes(
    bank: PrototypeBank,
    dataset: Dataset,
    tau: float,
    batch_size: int = 64,
) -> AnalysisResult:
    if len(dataset) == 0:
        raise DataError("analyze: empty dataset")
    num_classes = dataset.manifest.num_classes
    k = bank.total
    num_stages = len(bank.stage_indices)

    row_sums = np.zeros((num_classes, k))
    row_counts = np.zeros(num_classes)
    usage = np.zeros(k)
    per_batch: list[tuple[int, int, np.ndarray]] = []

    with torch.no_grad():
        for batch_idx, start in enumerate(range(0, len(dataset), batch_size)):
            samples = dataset.samples[start : start + batch_size]
            feats = collate_stage_features(samples, bank.stage_indices)
            labels = np.stack([s.labels for s in samples]).astype(bool)
            per_sample = np.zeros((len(samples), k))
            for pos in range(num_stages):
                weights = soft_assignment(feats[pos], bank, pos, tau).weights.numpy()
                mass = weights.mean(axis=1)  # (B, K): mean over patches
                per_sample += mass / num_stages
                stage_mass = weights.sum(axis=(0, 1))
                usage += stage_mass
                per_batch.append((batch_idx, pos, stage_mass))
            for c in range(num_classes):
                mask = labels[:, c]
                if mask.any():
                    row_sums[c] += per_sample[mask].sum(axis=0)
                    row_counts[c] += int(mask.sum())

    correlation = np.zeros_like(row_sums)
    for c in range(num_classes):
        if row_counts[c] > 0:
            correlation[c] = row_sums[c] / row_counts[c]
            total = correlation[c].sum()
            if total > 0:
                correlation[c] /= total

    uniform_share = usage.sum() / k if k else 0.0
    dead = [int(i) for i in np.flatnonzero(usage < DEAD_FRACTION_OF_UNIFORM * uniform_share)]
    return AnalysisResult(
        correlation=correlation,
        usage=usage,
        per_batch_usage=per_batch,
        dead_prototypes=dead,
        owner=bank.owner.copy(),
    )


def write_analysis(result: AnalysisResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "correlation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [f"proto_{k}" for k in range(result.correlation.shape[1])])
        for c, row in enumerate(result.correlation):
            writer.writerow([c] + [f"{v:.8f}" for v in row])

    with open(out / "usage.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prototype", "owner_class", "total_mass", "dead"])
        for k, mass in enumerate(result.usage):
            writer.writerow(
                [k, int(result.owner[k]), f"{mass:.8f}", int(k in result.dead_prototypes)]
            )

    with open(out / "assignment_histograms.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "stage_pos", "prototype", "mass"])
        for batch_idx, pos, mass in result.per_batch_usage:
            for k, v in enumerate(mass):
                writer.writerow([batch_idx, pos, k, f"{v:.8f}"])

    _write_heatmap(result.correlation, out / "correlation_heatmap.png")

    lines = [
        f"prototypes: {len(result.usage)}",
        f"dead prototypes (<{DEAD_FRACTION_OF_UNIFORM:g} of uniform share): "
        f"{result.dead_prototypes}",
        f"owner-dominant rows: {result.dominant_on_owner():.3f}",
    ]
    (out / "analysis.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_heatmap(correlation: np.ndarray, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    im = ax.imshow(correlation, aspect="auto", cmap="viridis")
    ax.set_xlabel("prototype")
    ax.set_ylabel("class")
    fig.colorbar(im, ax=ax, label="mean assignment mass")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
