"""Digital topology of binary masks: components, Betti numbers, verdicts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

ANNULUS = (1, 1)


@dataclass
class TopologyReport:
    b0: int
    b1: int
    correct: bool


def connected_components(mask, connectivity: int = 4) -> tuple[int, np.ndarray]:
    """Return ``(count, labels)``; labels are 0 for background, 1..count otherwise."""
    labels, count = _kernels.label(np.asarray(mask, dtype=bool), connectivity)
    return int(count), labels


def betti_numbers(mask) -> tuple[int, int]:
    """(b0, b1) with 4-connected foreground and 8-connected background.

    The mask is padded with one background ring so every border-touching
    background pixel joins the single exterior component.
    """
    m = np.asarray(mask, dtype=bool)
    b0, _ = connected_components(m, 4)
    bg = np.pad(~m, 1, constant_values=True)
    n_bg, _ = connected_components(bg, 8)
    return b0, n_bg - 1


def topology_correct(mask, expected: tuple[int, int] = ANNULUS) -> TopologyReport:
    b0, b1 = betti_numbers(mask)
    return TopologyReport(b0, b1, (b0, b1) == tuple(expected))


def threshold(y_soft, t: float = 0.5) -> np.ndarray:
    y = y_soft.data if hasattr(y_soft, "data") and not isinstance(y_soft, np.ndarray) else y_soft
    return np.asarray(y) >= t
