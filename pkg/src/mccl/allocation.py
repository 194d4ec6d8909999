"""Frequency-aware prototype budget allocation.

Class frequencies are normalized, inverted, renormalized, and scaled by the
total budget; the resulting real quotas are converted to integers with the
largest remainder method so the budget sums exactly. Rare classes therefore
receive more prototypes than frequent ones (up to a rounding unit).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class AllocationPlan:
    budgets: np.ndarray  # (C,) positive ints, sums to total
    total: int

    @property
    def num_classes(self) -> int:
        return len(self.budgets)

    def owner_vector(self) -> np.ndarray:
        """Class index owning each prototype slot, in class-index order."""
        return np.repeat(np.arange(self.num_classes), self.budgets)


def inverse_frequency_quotas(counts: np.ndarray, total: int) -> np.ndarray:
    """Real-valued per-class quotas before integer rounding.

    Zero counts are clamped to one first; an inverse frequency would
    otherwise be infinite.
    """
    counts = np.asarray(counts, dtype=np.float64)
    counts = np.maximum(counts, 1.0)
    freq = counts / counts.sum()
    weights = 1.0 / freq
    weights /= weights.sum()
    return weights * total


def allocate_prototypes(counts, total: int) -> AllocationPlan:
    """Distribute ``total`` prototypes across classes by inverse frequency.

    Every class ends up with at least one prototype: a class rounded to
    zero takes a slot from the currently most over-allocated class.
    """
    counts = np.asarray(counts, dtype=np.int64)
    num_classes = len(counts)
    if num_classes == 0:
        raise ConfigError("allocation: empty counts vector")
    if (counts < 0).any():
        raise ConfigError("allocation: negative class count")
    if counts.sum() == 0:
        raise ConfigError("allocation: all class counts are zero")
    if total < num_classes:
        raise ConfigError(
            f"allocation: budget {total} cannot give each of {num_classes} "
            "classes at least one prototype"
        )

    quotas = inverse_frequency_quotas(counts, total)
    floors = np.floor(quotas).astype(np.int64)
    remainders = quotas - floors
    seats = total - int(floors.sum())
    order = np.lexsort((np.arange(num_classes), -remainders))
    budgets = floors.copy()
    budgets[order[:seats]] += 1

    # Min-one rule: lift starved classes, stealing from whichever class is
    # currently most over-allocated relative to its quota (never below 2).
    for c in np.flatnonzero(budgets == 0):
        surplus = np.where(budgets >= 2, budgets - quotas, -np.inf)
        donor = int(np.argmax(surplus))
        if not np.isfinite(surplus[donor]):
            raise ConfigError("allocation: no donor class with budget >= 2")
        budgets[donor] -= 1
        budgets[c] = 1

    assert budgets.sum() == total
    return AllocationPlan(budgets=budgets, total=total)
