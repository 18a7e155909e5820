"""Frames, pinhole cameras, rays, grids and interpolation.

Conventions used everywhere in the package:

* world z is up, the ground plane is z = 0;
* a frame (ego) pose maps frame-local coordinates to world, the local frame
  has x forward, y left and z up;
* a camera looks along +z of its own frame, image u grows along camera +x and
  v along camera +y; pixel (row r, col c) has its center at (c + 0.5, r + 0.5);
* BEV arrays are indexed ``[ix, iy]`` with x east and y north in world maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Pose:
    """Rigid local->world transform ``p_world = R @ p_local + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r @ r.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
            and np.all(np.isfinite(self.translation))
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        """Rotation about +z by ``yaw`` radians (x̂ maps to ŷ at +90°)."""
        return cls(rot_z(yaw), np.asarray(translation, dtype=np.float64))


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def transform_point(pose: Pose, p, direction: str = "forward") -> np.ndarray:
    """Map points local->world (``forward``) or world->local (``inverse``).

    ``p`` may be a single 3-vector or an ``(..., 3)`` array.
    """
    p = np.asarray(p, dtype=np.float64)
    if direction == "forward":
        return p @ pose.rotation.T + pose.translation
    if direction == "inverse":
        return (p - pose.translation) @ pose.rotation
    raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=Pose)  # camera -> frame

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def optical_axis(self) -> np.ndarray:
        """Camera +z expressed in the frame."""
        return self.extrinsic.rotation[:, 2].copy()


def make_camera(width: int, height: int, hfov_deg: float, yaw: float = 0.0,
                pitch: float = 0.0, position=(0.0, 0.0, 0.0)) -> CameraModel:
    """Pinhole camera mounted on a frame looking along frame +x.

    ``yaw`` turns the camera left about frame z, ``pitch`` > 0 tilts it down.
    """
    f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2.0)
    # camera axes (x right, y down, z forward) for a level, forward camera
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    r = rot_z(yaw) @ rot_y(pitch) @ base
    return CameraModel(f, f, width / 2.0, height / 2.0, width, height,
                       Pose(r, np.asarray(position, dtype=np.float64)))


def project_points(cam: CameraModel, p_frame, near: float = 0.1):
    """Vectorized pinhole projection of frame-local points.

    Returns ``(u, v, depth, valid)``; ``valid`` is False for points at or
    behind the near plane or outside the image rectangle.
    """
    p = transform_point(cam.extrinsic, p_frame, "inverse")
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z > near, z, 1.0)
        u = cam.fx * p[..., 0] / safe + cam.cx
        v = cam.fy * p[..., 1] / safe + cam.cy
    valid = (z > near) & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
    return u, v, z, valid


def project_point(cam: CameraModel, p_frame, near: float = 0.1):
    """Project one frame-local point; ``None`` when out of frustum."""
    u, v, z, ok = project_points(cam, np.asarray(p_frame, dtype=np.float64), near)
    if not bool(ok):
        return None
    return float(u), float(v), float(z)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.1
    t_far: float = 64.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("zero ray direction")
        object.__setattr__(self, "direction", d / n)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def pixel_rays(cam: CameraModel, frame_pose: Pose, u, v):
    """World-space origins and unit directions for pixel coordinates."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], -1)
    cam_to_world = frame_pose.compose(cam.extrinsic)
    d = d_cam @ cam_to_world.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam_to_world.translation, d.shape).copy()
    return o, d


def pixel_ray(cam: CameraModel, frame_pose: Pose, u: float, v: float,
              t_near: float = 0.1, t_far: float = 64.0) -> Ray:
    if not (0 <= u <= cam.width and 0 <= v <= cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    o, d = pixel_rays(cam, frame_pose, u, v)
    return Ray(o, d, t_near, t_far)


def pixel_grid_rays(cam: CameraModel, frame_pose: Pose):
    """Rays through every pixel center, shaped ``(H, W, 3)``."""
    vv, uu = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64) + 0.5
    return pixel_rays(cam, frame_pose, uu, vv)


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned regular grid; ``origin`` is the min corner."""

    origin: tuple
    cell_size: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.origin) != len(self.dims) or len(self.dims) not in (2, 3):
            raise ValueError("GridSpec needs matching 2- or 3-axis origin and dims")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if min(self.dims) < 1:
            raise ValueError("dims must be >= 1 per axis")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * self.cell_size

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.extent

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.cell_size

    def cell_centers(self) -> np.ndarray:
        """All cell centers, shape ``dims + (ndim,)``."""
        axes = [self.centers(a) for a in range(self.ndim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1)

    def to_continuous(self, p) -> np.ndarray:
        """World coordinates -> continuous cell coordinates (cell centers are integers)."""
        p = np.asarray(p, dtype=np.float64)[..., : self.ndim]
        return (p - np.asarray(self.origin)) / self.cell_size - 0.5

    def cell_index(self, p) -> np.ndarray:
        """Integer cell containing ``p`` (may be out of range)."""
        p = np.asarray(p, dtype=np.float64)[..., : self.ndim]
        return np.floor((p - np.asarray(self.origin)) / self.cell_size).astype(np.int64)

    def cell_center(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * self.cell_size

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)[..., : self.ndim]
        return np.all((p >= np.asarray(self.origin)) & (p <= self.upper), axis=-1)

    def crop(self, lo_idx, hi_idx) -> "GridSpec":
        lo = np.asarray(lo_idx)
        return GridSpec(tuple(self.cell_center(lo) - self.cell_size / 2),
                        self.cell_size, tuple(np.asarray(hi_idx) - lo))

    def aligned_with(self, other: "GridSpec", tol: float = 1e-9) -> bool:
        return (self.dims == other.dims and abs(self.cell_size - other.cell_size) < tol
                and np.allclose(self.origin, other.origin, atol=tol))

    def as_2d(self) -> "GridSpec":
        return GridSpec(self.origin[:2], self.cell_size, self.dims[:2])


def bilinear_weights(shape, c0, c1):
    """Corner indices and weights for bilinear sampling along the first two axes.

    ``c0``/``c1`` are continuous coordinates along axis 0/1.  Returns
    ``(i0, i1, w, inside)`` with ``i0``/``i1``/``w`` shaped ``(..., 4)``.
    Samples whose footprint leaves the array have ``inside`` False (their
    indices are clamped so they can still be gathered safely).
    """
    c0 = np.asarray(c0, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    n0, n1 = shape[0], shape[1]
    inside = (c0 >= 0) & (c0 <= n0 - 1) & (c1 >= 0) & (c1 <= n1 - 1)
    a0 = np.clip(np.floor(c0), 0, max(n0 - 2, 0)).astype(np.int64)
    a1 = np.clip(np.floor(c1), 0, max(n1 - 2, 0)).astype(np.int64)
    f0 = np.clip(c0 - a0, 0.0, 1.0)
    f1 = np.clip(c1 - a1, 0.0, 1.0)
    i0 = np.stack([a0, a0, a0 + 1, a0 + 1], -1)
    i1 = np.stack([a1, a1 + 1, a1, a1 + 1], -1)
    w = np.stack([(1 - f0) * (1 - f1), (1 - f0) * f1, f0 * (1 - f1), f0 * f1], -1)
    i0 = np.minimum(i0, n0 - 1)
    i1 = np.minimum(i1, n1 - 1)
    return i0, i1, w, inside


def sample_grid2d(arr, c0, c1):
    """Bilinear sample of ``arr`` (axes 0, 1 spatial) at continuous index coords.

    Returns ``(values, inside)``; values outside the footprint are NaN.
    """
    arr = np.asarray(arr)
    i0, i1, w, inside = bilinear_weights(arr.shape, c0, c1)
    vals = arr[i0, i1]
    if arr.ndim == 2:
        out = np.sum(vals * w, axis=-1)
    elif arr.ndim == 3:
        out = np.einsum("...k,...kc->...c", w, vals)
    else:
        raise ValueError("expected a 2-D array with at most one channel axis")
    out = np.where(inside.reshape(inside.shape + (1,) * (out.ndim - inside.ndim)), out, np.nan)
    return out, inside


def bilinear_sample(map2d, x, y):
    """Bilinear sample of a 2-D (optionally channelled) array.

    ``x`` runs along columns (axis 1) and ``y`` along rows (axis 0); integer
    coordinates hit cell centers.  Returns ``None`` when the four-neighbour
    footprint leaves the array.
    """
    arr = np.asarray(map2d, dtype=np.float64)
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError("bilinear_sample needs at least 2 cells per axis")
    vals, inside = sample_grid2d(arr, y, x)
    if np.ndim(inside) == 0:
        return vals if bool(inside) else None
    return vals


def trilinear_weights(dims, p):
    """Eight corner flat indices and weights for continuous voxel coords ``p``.

    ``p`` has shape ``(..., 3)``; returns ``(idx, w, inside)`` with ``idx``
    and ``w`` shaped ``(..., 8)``.  Corner order is (dx, dy, dz) in binary.
    """
    p = np.asarray(p, dtype=np.float64)
    dims_a = np.asarray(dims)
    inside = np.all((p >= 0) & (p <= dims_a - 1), axis=-1)
    base = np.clip(np.floor(p), 0, np.maximum(dims_a - 2, 0)).astype(np.int64)
    f = np.clip(p - base, 0.0, 1.0)
    idx, w = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = np.minimum(base[..., 0] + dx, dims[0] - 1)
                iy = np.minimum(base[..., 1] + dy, dims[1] - 1)
                iz = np.minimum(base[..., 2] + dz, dims[2] - 1)
                idx.append((ix * dims[1] + iy) * dims[2] + iz)
                w.append((f[..., 0] if dx else 1 - f[..., 0])
                         * (f[..., 1] if dy else 1 - f[..., 1])
                         * (f[..., 2] if dz else 1 - f[..., 2]))
    return np.stack(idx, -1), np.stack(w, -1), inside


def trilinear_sample(grid, p):
    """Trilinear sample of a ``(X, Y, Z[, C])`` array at one continuous voxel coord.

    Returns ``(value, weights, indices)`` where indices are flat into the
    first three axes.  Raises ``ValueError`` outside the voxel-center hull.
    """
    grid = np.asarray(grid, dtype=np.float64)
    dims = grid.shape[:3]
    idx, w, inside = trilinear_weights(dims, np.asarray(p, dtype=np.float64))
    if not bool(inside):
        raise ValueError(f"point {p} outside grid footprint {dims}")
    flat = grid.reshape((-1,) + grid.shape[3:])
    value = np.tensordot(w, flat[idx], axes=(0, 0))
    return value, w, idx
