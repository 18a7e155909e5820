"""BEV raster containers shared by the onboard model, fusion and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class SemanticMap:
    """Per-cell class scores on a grid.

    ``kind`` is ``"logits"`` for raw decoder output or ``"probs"`` for
    distributions (fused maps, one-hot ground truth).
    """

    grid: GridSpec
    scores: np.ndarray          # (X, Y, n_classes)
    coverage: np.ndarray        # (X, Y) bool
    kind: str = "logits"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.coverage = np.asarray(self.coverage, dtype=bool)
        if self.scores.shape[:2] != tuple(self.grid.dims[:2]) or self.coverage.shape != self.scores.shape[:2]:
            raise ValueError("semantic map arrays do not match grid dims")
        if self.kind not in ("logits", "probs"):
            raise ValueError(f"unknown score kind {self.kind!r}")

    @classmethod
    def from_labels(cls, grid: GridSpec, labels: np.ndarray, n_classes: int = 4,
                    coverage: np.ndarray | None = None) -> "SemanticMap":
        onehot = np.eye(n_classes)[labels]
        cov = np.ones(labels.shape, bool) if coverage is None else coverage
        return cls(grid, onehot, cov, "probs")

    def probabilities(self) -> np.ndarray:
        return softmax(self.scores) if self.kind == "logits" else self.scores

    def labels(self) -> np.ndarray:
        return np.argmax(self.scores, axis=-1)


@dataclass
class BEVFeatureMap:
    grid: GridSpec
    features: np.ndarray        # (X, Y, C)
    coverage: np.ndarray        # (X, Y) bool


@dataclass
class ConfidenceMap:
    grid: GridSpec
    weights: np.ndarray         # (X, Y), (0, 1) on covered cells, 0 elsewhere
    coverage: np.ndarray
