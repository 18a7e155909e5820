"""Region-centric fusion of per-frame semantic maps into local or global maps.

For every target cell the fused distribution is the confidence-weighted mean
of the frames' softmax probabilities, each frame being bilinearly resampled
at the cell centre.  A frame contributes to a cell only when all four
bilinear neighbours of the sample lie on cells that the frame covers.
Average fusion is the same computation with unit confidences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec, Pose, bilinear_weights, transform_point
from .maps import ConfidenceMap, SemanticMap

N_CLASSES = 4
DENOM_FLOOR = 1e-12
# background black, divider orange, crossing blue, boundary green
PALETTE = np.array([[0, 0, 0], [255, 140, 0], [30, 110, 255], [40, 200, 60]], dtype=np.uint8)


@dataclass
class Resampling:
    """Bilinear footprints of target cells inside one frame's local grid.

    ``target`` holds flat indices of target cells that the frame reaches,
    ``source`` and ``weights`` the four flat local-grid corners per target.
    """

    target: np.ndarray      # (J,)
    source: np.ndarray      # (J, 4)
    weights: np.ndarray     # (J, 4)

    def __len__(self):
        return len(self.target)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Resample per-cell ``values`` (flat along axis 0) onto the reached targets."""
        vals = values[self.source]
        w = self.weights.reshape(self.weights.shape + (1,) * (vals.ndim - 2))
        return np.sum(vals * w, axis=1)


def resampling(local2d: GridSpec, coverage: np.ndarray, pose: Pose, target_points: np.ndarray) -> Resampling:
    """Footprints of world points ``target_points`` (N, 2 or 3) in a frame's local grid."""
    pts = np.asarray(target_points, dtype=np.float64)
    if pts.shape[-1] == 2:
        pts = np.concatenate([pts, np.zeros(pts.shape[:-1] + (1,))], -1)
    local = transform_point(pose, pts, "inverse")
    c = local2d.to_continuous(local[:, :2])
    i0, i1, w, inside = bilinear_weights(local2d.dims, c[:, 0], c[:, 1])
    ok = inside & np.all(coverage[i0, i1], axis=-1)
    src = i0 * local2d.dims[1] + i1
    return Resampling(np.flatnonzero(ok), src[ok], w[ok])


@dataclass
class GlobalMapAccumulator:
    grid: GridSpec
    numerator: np.ndarray       # (X, Y, 4)
    denominator: np.ndarray     # (X, Y)
    frames_seen: np.ndarray     # (X, Y) int

    @classmethod
    def empty(cls, grid: GridSpec, n_classes: int = N_CLASSES) -> "GlobalMapAccumulator":
        g = grid.as_2d() if grid.ndim == 3 else grid
        X, Y = g.dims
        return cls(g, np.zeros((X, Y, n_classes)), np.zeros((X, Y)), np.zeros((X, Y), np.int64))

    def merge(self, other: "GlobalMapAccumulator") -> "GlobalMapAccumulator":
        if not self.grid.aligned_with(other.grid) or self.grid.dims != other.grid.dims:
            raise ValueError("cannot merge accumulators on different grids")
        return GlobalMapAccumulator(self.grid, self.numerator + other.numerator,
                                    self.denominator + other.denominator,
                                    self.frames_seen + other.frames_seen)

    def target_points(self) -> np.ndarray:
        return self.grid.cell_centers().reshape(-1, 2)


def accumulate_frame(acc: GlobalMapAccumulator, sem: SemanticMap, conf: ConfidenceMap | None,
                     pose: Pose, points: np.ndarray | None = None) -> GlobalMapAccumulator:
    """Add one frame's probabilities, weighted by its confidences, in place.

    ``conf=None`` means unit confidence on covered cells.  ``points`` lets
    callers pass precomputed world cell centres of ``acc.grid``.
    """
    if conf is not None and (conf.grid.dims != sem.grid.dims or not conf.grid.aligned_with(sem.grid)):
        raise ValueError("confidence map is not aligned with the semantic map")
    if sem.grid.cell_size != acc.grid.cell_size:
        raise ValueError("frame and accumulator grids differ in resolution")
    pts = acc.target_points() if points is None else points
    rs = resampling(sem.grid, sem.coverage, pose, pts)
    if len(rs) == 0:
        return acc
    probs = sem.probabilities().reshape(-1, sem.scores.shape[-1])
    weights = np.ones(probs.shape[0]) if conf is None else conf.weights.reshape(-1)
    s = rs.apply(probs)
    c = rs.apply(weights)
    num = acc.numerator.reshape(-1, acc.numerator.shape[-1])
    num[rs.target] += c[:, None] * s
    acc.denominator.reshape(-1)[rs.target] += c
    acc.frames_seen.reshape(-1)[rs.target] += 1
    return acc


def finalize(acc: GlobalMapAccumulator) -> SemanticMap:
    """Fused probabilities; cells without usable weight are background and uncovered."""
    cov = acc.denominator > DENOM_FLOOR
    probs = np.zeros_like(acc.numerator)
    probs[..., 0] = 1.0
    probs[cov] = acc.numerator[cov] / acc.denominator[cov][:, None]
    return SemanticMap(acc.grid, probs, cov, "probs")


def average_fusion(frames, grid: GridSpec) -> SemanticMap:
    """Equal-weight fusion of ``(SemanticMap, Pose)`` pairs."""
    acc = GlobalMapAccumulator.empty(grid)
    pts = acc.target_points()
    for sem, pose in frames:
        accumulate_frame(acc, sem, None, pose, pts)
    return finalize(acc)


def fuse_sequence(frames, grid: GridSpec, mode: str = "average", confidence=None) -> SemanticMap:
    """Stream frames into a fused map.

    ``frames`` yields objects with ``semantic`` and ``pose`` attributes and is
    consumed one item at a time.  In ``"mvmap"`` mode ``confidence(frame)``
    returns the frame's ConfidenceMap.  No frame is referenced after its
    contribution has been added.
    """
    if mode not in ("average", "mvmap"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    if mode == "mvmap" and confidence is None:
        raise ValueError("mvmap fusion needs a confidence function")
    acc = GlobalMapAccumulator.empty(grid)
    pts = acc.target_points()
    for frame in frames:
        conf = confidence(frame) if mode == "mvmap" else None
        accumulate_frame(acc, frame.semantic, conf, frame.pose, pts)
        del frame, conf
    return finalize(acc)


def colorize(sem: SemanticMap) -> np.ndarray:
    """``(Y, X, 3)`` uint8 image with +y up; uncovered cells are black."""
    lab = np.where(sem.coverage, sem.labels(), 0)
    return PALETTE[lab].transpose(1, 0, 2)[::-1]
