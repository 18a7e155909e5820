"""Procedural road scenes with exact ground truth.

A scene is a flat ground plane (z = 0) carrying painted HD-map elements
(dividers, zebra crossings, road boundaries) plus static box occluders.
Rendering is analytic ray casting, so colours and depths are exact and can
serve as oracles for the radiance field and the BEV models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .geometry import CameraModel, GridSpec, Pose, make_camera, pixel_grid_rays, transform_point
from .maps import SemanticMap

BACKGROUND, DIVIDER, CROSSING, BOUNDARY = 0, 1, 2, 3
CLASS_NAMES = ("background", "divider", "crossing", "boundary")
N_CLASSES = 4

BASE_COLORS = np.array([
    [0.36, 0.36, 0.38],   # asphalt / background
    [0.92, 0.78, 0.16],   # divider
    [0.95, 0.95, 0.95],   # crossing stripe
    [0.25, 0.72, 0.82],   # boundary
])
SKY_COLOR = np.array([0.55, 0.75, 0.95])
TEXTURE_AMPLITUDE = 0.05

SKY, GROUND, BOX = 0, 1, 2


@dataclass
class Polyline:
    points: np.ndarray          # (n, 2) metres
    width: float
    closed: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def segments(self):
        p = self.points
        if self.closed:
            return p, np.roll(p, -1, axis=0)
        return p[:-1], p[1:]

    def distance(self, xy: np.ndarray) -> np.ndarray:
        a, b = self.segments()
        xy = np.asarray(xy, dtype=np.float64)
        flat = np.ascontiguousarray(xy.reshape(-1, 2))
        return _segment_distance(flat, np.ascontiguousarray(a), np.ascontiguousarray(b)).reshape(xy.shape[:-1])


@numba.njit(cache=True)
def _segment_distance(p, a, b):
    out = np.empty(p.shape[0])
    for i in range(p.shape[0]):
        best = np.inf
        for j in range(a.shape[0]):
            vx = b[j, 0] - a[j, 0]
            vy = b[j, 1] - a[j, 1]
            rx = p[i, 0] - a[j, 0]
            ry = p[i, 1] - a[j, 1]
            l2 = vx * vx + vy * vy
            t = 0.0
            if l2 > 0:
                t = min(max((rx * vx + ry * vy) / l2, 0.0), 1.0)
            dx = rx - t * vx
            dy = ry - t * vy
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)
    return out


@dataclass
class Crossing:
    center: np.ndarray          # (2,)
    size: np.ndarray            # (across, along) metres
    angle: float                # direction of the "across" axis, radians
    stripe_period: float = 2.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)

    def stripe_mask(self, xy: np.ndarray) -> np.ndarray:
        rel = np.asarray(xy, dtype=np.float64) - self.center
        c, s = np.cos(self.angle), np.sin(self.angle)
        a = rel[..., 0] * c + rel[..., 1] * s
        b = -rel[..., 0] * s + rel[..., 1] * c
        inside = (np.abs(a) <= self.size[0] / 2) & (np.abs(b) <= self.size[1] / 2)
        phase = np.mod(a + self.size[0] / 2, self.stripe_period)
        return inside & (phase < self.stripe_period / 2)


@dataclass
class Box:
    center: np.ndarray          # (3,), base rests on z = 0
    size: np.ndarray            # (3,)
    color: np.ndarray           # (3,)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)

    @property
    def lo(self):
        return self.center - self.size / 2

    @property
    def hi(self):
        return self.center + self.size / 2


@dataclass
class SceneSpec:
    world: GridSpec = field(default_factory=lambda: GridSpec((0.0, 0.0), 0.5, (160, 160)))
    dividers: list = field(default_factory=list)
    crossings: list = field(default_factory=list)
    boundaries: list = field(default_factory=list)
    occluders: list = field(default_factory=list)
    texture_seed: int = 0
    style: str = "straight"
    name: str = "scene"

    def validate(self):
        lo = np.asarray(self.world.origin)
        hi = self.world.upper
        for pl in self.dividers + self.boundaries:
            if np.any(pl.points < lo - 1e-9) or np.any(pl.points > hi + 1e-9):
                raise ValueError("painted polyline leaves the world extent")
        for c in self.crossings:
            r = np.hypot(*c.size) / 2
            if np.any(c.center - r < lo) or np.any(c.center + r > hi):
                raise ValueError("crossing leaves the world extent")
        for b in self.occluders:
            if np.any(b.size <= 0) or abs(b.lo[2]) > 1e-9:
                raise ValueError("occluders need positive size and base at z=0")

    def without_occluders(self) -> "SceneSpec":
        return SceneSpec(self.world, self.dividers, self.crossings, self.boundaries, [],
                         self.texture_seed, self.style, self.name)

    # serialization: plain JSON so scenes stay hand-editable
    def to_dict(self) -> dict:
        pl = lambda p: {"points": p.points.tolist(), "width": p.width, "closed": p.closed}
        return {
            "name": self.name,
            "style": self.style,
            "texture_seed": self.texture_seed,
            "world": {"origin": list(self.world.origin), "cell_size": self.world.cell_size,
                      "dims": list(self.world.dims)},
            "dividers": [pl(p) for p in self.dividers],
            "boundaries": [pl(p) for p in self.boundaries],
            "crossings": [{"center": c.center.tolist(), "size": c.size.tolist(),
                           "angle": c.angle, "stripe_period": c.stripe_period}
                          for c in self.crossings],
            "occluders": [{"center": b.center.tolist(), "size": b.size.tolist(),
                           "color": b.color.tolist()} for b in self.occluders],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        w = d["world"]
        return cls(
            world=GridSpec(tuple(w["origin"]), w["cell_size"], tuple(w["dims"])),
            dividers=[Polyline(**p) for p in d.get("dividers", [])],
            boundaries=[Polyline(**p) for p in d.get("boundaries", [])],
            crossings=[Crossing(**c) for c in d.get("crossings", [])],
            occluders=[Box(**b) for b in d.get("occluders", [])],
            texture_seed=int(d.get("texture_seed", 0)),
            style=d.get("style", "straight"),
            name=d.get("name", "scene"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Trajectory:
    frame_poses: list
    cameras: list

    def __post_init__(self):
        if len(self.frame_poses) < 1:
            raise ValueError("trajectory needs at least one frame")
        t = np.array([p.translation for p in self.frame_poses])
        if len(t) > 1 and np.max(np.linalg.norm(np.diff(t, axis=0), axis=1)) > 10.0:
            raise ValueError("consecutive frames more than 10 m apart")

    def __len__(self):
        return len(self.frame_poses)


def paint_class(scene: SceneSpec, x, y) -> np.ndarray:
    """Ground-truth class at ground points; boundary > crossing > divider."""
    xy = np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float)), -1)
    out = np.full(xy.shape[:-1], BACKGROUND, dtype=np.int64)
    for pl in scene.dividers:
        out[pl.distance(xy) <= pl.width / 2] = DIVIDER
    for c in scene.crossings:
        out[c.stripe_mask(xy)] = CROSSING
    for pl in scene.boundaries:
        out[pl.distance(xy) <= pl.width / 2] = BOUNDARY
    return out


def _texture_params(seed: int, n: int = 6):
    rng = np.random.default_rng(seed)
    wavelengths = rng.uniform(2.0, 8.0, n)
    angles = rng.uniform(0, np.pi, n)
    k = (2 * np.pi / wavelengths)[:, None] * np.stack([np.cos(angles), np.sin(angles)], 1)
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0.5, 1.0, n)
    return k, phase, amp / amp.sum()


def ground_texture(seed: int, x, y) -> np.ndarray:
    """Smooth seeded luminance texture bounded by ``TEXTURE_AMPLITUDE``."""
    k, phase, amp = _texture_params(seed)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    arg = np.multiply.outer(x, k[:, 0]) + np.multiply.outer(y, k[:, 1]) + phase
    return TEXTURE_AMPLITUDE * np.sum(amp * np.sin(arg), axis=-1)


def paint_color(scene: SceneSpec, x, y) -> np.ndarray:
    cls = paint_class(scene, x, y)
    tex = ground_texture(scene.texture_seed, x, y)
    return np.clip(BASE_COLORS[cls] + tex[..., None], 0.0, 1.0)


def ray_cast(scene: SceneSpec, o: np.ndarray, d: np.ndarray):
    """Nearest hit of rays against ground plane and boxes.

    Returns ``(t, kind, box_id)``; ``t`` is +inf and ``kind`` SKY on a miss.
    """
    o = np.asarray(o, float).reshape(-1, 3)
    d = np.asarray(d, float).reshape(-1, 3)
    n = len(o)
    t = np.full(n, np.inf)
    kind = np.full(n, SKY, dtype=np.int64)
    box_id = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
    hit = (tg > 0) & np.isfinite(tg)
    t[hit] = tg[hit]
    kind[hit] = GROUND
    for i, b in enumerate(scene.occluders):
        tb = ray_box(o, d, b.lo, b.hi)
        closer = tb < t
        t[closer] = tb[closer]
        kind[closer] = BOX
        box_id[closer] = i
    return t, kind, box_id


def ray_box(o, d, lo, hi) -> np.ndarray:
    """Slab-method entry distance (> 0) of rays into an AABB, +inf on a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    ok = (tmax >= tmin) & (tmin > 0)
    return np.where(ok, tmin, np.inf)


def render_frame(scene: SceneSpec, pose: Pose, cam: CameraModel):
    """Exact RGB and depth (ray distance, +inf for sky) images for one camera."""
    o, d = pixel_grid_rays(cam, pose)
    shape = d.shape[:2]
    t, kind, box_id = ray_cast(scene, o, d)
    rgb = np.tile(SKY_COLOR, (t.size, 1))
    g = kind == GROUND
    if np.any(g):
        p = o.reshape(-1, 3)[g] + t[g, None] * d.reshape(-1, 3)[g]
        rgb[g] = paint_color(scene, p[:, 0], p[:, 1])
    b = kind == BOX
    if np.any(b):
        colors = np.array([bx.color for bx in scene.occluders])
        rgb[b] = colors[box_id[b]]
    return rgb.reshape(shape + (3,)), t.reshape(shape)


def gt_labels(scene: SceneSpec, region: GridSpec) -> np.ndarray:
    c = region.cell_centers()
    return paint_class(scene, c[..., 0], c[..., 1])


def gt_bev(scene: SceneSpec, region: GridSpec) -> SemanticMap:
    """One-hot ground truth rasterized at cell centers of an axis-aligned region."""
    lo = np.asarray(scene.world.origin)
    if np.any(np.asarray(region.origin) < lo - 1e-9) or np.any(region.upper > scene.world.upper + 1e-9):
        raise ValueError("region lies outside the scene world extent")
    labels = gt_labels(scene, region)
    return SemanticMap.from_labels(region, labels)


def gt_local_labels(scene: SceneSpec, pose: Pose, local: GridSpec) -> np.ndarray:
    """Ground-truth classes at the cell centers of an ego-centred grid."""
    c = local.cell_centers()
    pts = np.concatenate([c, np.zeros(c.shape[:-1] + (1,))], -1)
    w = transform_point(pose, pts, "forward")
    return paint_class(scene, w[..., 0], w[..., 1])


def ground_visibility(scene: SceneSpec, pose: Pose, cameras, points_world, near: float = 0.1):
    """For ground points: (seen by any camera frustum, unobstructed from some camera)."""
    from .geometry import project_points

    pts = np.asarray(points_world, float).reshape(-1, 3)
    local = transform_point(pose, pts, "inverse")
    in_view = np.zeros(len(pts), bool)
    visible = np.zeros(len(pts), bool)
    for cam in cameras:
        _, _, _, ok = project_points(cam, local, near)
        if not np.any(ok):
            continue
        in_view |= ok
        origin = pose.compose(cam.extrinsic).translation
        seg = pts[ok] - origin
        dist = np.linalg.norm(seg, axis=1)
        t, _, _ = ray_cast(scene.without_occluders(), np.broadcast_to(origin, seg.shape), seg / dist[:, None])
        tb = np.full(len(seg), np.inf)
        for b in scene.occluders:
            tb = np.minimum(tb, ray_box(np.broadcast_to(origin, seg.shape), seg / dist[:, None], b.lo, b.hi))
        clear = tb >= dist - 1e-6
        vis = np.zeros(len(pts), bool)
        vis[np.flatnonzero(ok)] = clear
        visible |= vis
    return in_view, visible


# --------------------------------------------------------------------------
# routes, trajectories and default scenes

STYLES = ("straight", "loop", "figure-eight")


def _resample(points: np.ndarray, closed: bool, spacing: float = 1.0):
    pts = np.vstack([points, points[:1]]) if closed else points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = max(int(np.ceil(total / spacing)), 2)
    q = np.linspace(0, total, n, endpoint=not closed)
    out = np.stack([np.interp(q, s, pts[:, 0]), np.interp(q, s, pts[:, 1])], 1)
    return out, total


def canonical_route(style: str, world: GridSpec, path_length: float | None = None):
    """Road centreline for a trajectory style: ``(points, closed, length)``."""
    center = np.asarray(world.origin) + world.extent / 2
    span = float(np.min(world.extent))
    s = np.linspace(0, 2 * np.pi, 721)[:-1]
    if style == "straight":
        length = path_length or 0.9 * span
        x = np.linspace(-length / 2, length / 2, 200)
        pts = np.stack([x, np.zeros_like(x)], 1) + center
        closed = False
    elif style == "loop":
        r = (path_length / (2 * np.pi)) if path_length else 0.33 * span
        pts = center + r * np.stack([np.cos(s), np.sin(s)], 1)
        closed = True
    elif style == "figure-eight":
        base = np.stack([np.sin(s), np.sin(s) * np.cos(s)], 1) * np.array([0.38 * span, 0.5 * span])
        if path_length:
            seg = np.linalg.norm(np.diff(np.vstack([base, base[:1]]), axis=0), axis=1).sum()
            base *= path_length / seg
        pts = center + base
        closed = True
    else:
        raise ValueError(f"unknown trajectory style {style!r}")
    pts, length = _resample(pts, closed, spacing=0.5)
    return pts, closed, length


def _route_frame(points, closed, s_query):
    """Positions and unit tangents at arc lengths along a polyline."""
    pts = np.vstack([points, points[:1]]) if closed else points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    sq = np.mod(s_query, total) if closed else np.clip(s_query, 0, total)
    pos = np.stack([np.interp(sq, s, pts[:, 0]), np.interp(sq, s, pts[:, 1])], -1)
    ds = 0.5
    lo = sq - ds if closed else np.clip(sq - ds, 0, total)
    hi = sq + ds if closed else np.clip(sq + ds, 0, total)
    lo, hi = (np.mod(lo, total), np.mod(hi, total)) if closed else (lo, hi)
    a = np.stack([np.interp(lo, s, pts[:, 0]), np.interp(lo, s, pts[:, 1])], -1)
    b = np.stack([np.interp(hi, s, pts[:, 0]), np.interp(hi, s, pts[:, 1])], -1)
    tan = b - a
    tan /= np.linalg.norm(tan, axis=-1, keepdims=True)
    return pos, tan


def default_rig(width: int = 128, height: int = 96, hfov_deg: float = 100.0,
                pitch_deg: float = 12.0, n_cameras: int = 2):
    """Evenly spread cameras around the frame (K=2: forward and backward)."""
    yaws = np.arange(n_cameras) * 2 * np.pi / n_cameras
    return [make_camera(width, height, hfov_deg, yaw=float(y), pitch=np.radians(pitch_deg))
            for y in yaws]


def make_trajectory(scene: SceneSpec, style: str, n_frames: int, rng_seed: int,
                    path_length: float | None = None, lane_offset: float = -2.5,
                    height: float = 1.5, cameras=None, yaw_jitter_deg: float = 1.0) -> Trajectory:
    """Keyframes evenly spaced by arc length along the route of ``style``.

    The frame origin is the sensor origin, ``height`` metres above ground.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    points, closed, length = canonical_route(style, scene.world, path_length)
    if closed:
        s = np.arange(n_frames) * length / n_frames
    else:
        s = np.linspace(0, length, n_frames) if n_frames > 1 else np.zeros(1)
    pos, tan = _route_frame(points, closed, s)
    normal = np.stack([-tan[:, 1], tan[:, 0]], 1)
    pos = pos + lane_offset * normal
    rng = np.random.default_rng(rng_seed)
    yaw = np.arctan2(tan[:, 1], tan[:, 0]) + np.radians(rng.uniform(-yaw_jitter_deg, yaw_jitter_deg, n_frames))
    poses = [Pose.from_yaw(float(a), (p[0], p[1], height)) for a, p in zip(yaw, pos)]
    return Trajectory(poses, list(cameras) if cameras is not None else default_rig())


def default_scene(seed: int, style: str = "loop", world: GridSpec | None = None,
                  road_half_width: float = 5.0, line_width: float = 1.0,
                  n_crossings: int = 3, n_occluders: int = 10, name: str | None = None) -> SceneSpec:
    """Seeded road scene painted along ``canonical_route(style)``."""
    rng = np.random.default_rng(seed)
    world = world or GridSpec((0.0, 0.0), 0.5, (160, 160))
    pts, closed, length = canonical_route(style, world)
    lo = np.asarray(world.origin) + 0.6
    hi = world.upper - 0.6

    def offset_line(off):
        s = np.linspace(0, length, len(pts), endpoint=not closed)
        p, t = _route_frame(pts, closed, s)
        q = p + off * np.stack([-t[:, 1], t[:, 0]], 1)
        return np.clip(q, lo, hi)

    dividers = [Polyline(np.clip(pts, lo, hi), line_width, closed)]
    boundaries = [Polyline(offset_line(road_half_width), line_width, closed),
                  Polyline(offset_line(-road_half_width), line_width, closed)]

    crossings, taken = [], []
    margin = 0.0 if closed else 8.0
    for _ in range(n_crossings * 20):
        if len(crossings) >= n_crossings:
            break
        sc = rng.uniform(margin, length - margin)
        if any(min(abs(sc - t), length - abs(sc - t)) < 15.0 for t in taken):
            continue
        p, t = _route_frame(pts, closed, np.array([sc]))
        angle = float(np.arctan2(t[0, 0], -t[0, 1]))     # across the road
        size = np.array([2 * road_half_width, rng.uniform(3.0, 4.0)])
        c = Crossing(p[0], size, angle, 2.0)
        if np.any(c.center - 6.5 < world.origin) or np.any(c.center + 6.5 > world.upper):
            continue
        crossings.append(c)
        taken.append(sc)

    occluders = []
    kinds = [np.array([4.5, 1.9, 1.6]), np.array([6.0, 2.2, 2.4]), np.array([9.0, 2.5, 3.2])]
    for _ in range(n_occluders * 30):
        if len(occluders) >= n_occluders:
            break
        sc = rng.uniform(0, length)
        if any(min(abs(sc - t), length - abs(sc - t)) < 6.0 for t in taken):
            continue
        lateral = rng.choice([2.5, road_half_width + 3.0, -(road_half_width + 3.0)], p=[0.5, 0.25, 0.25])
        p, t = _route_frame(pts, closed, np.array([sc]))
        c2 = p[0] + lateral * np.array([-t[0, 1], t[0, 0]])
        size = kinds[rng.integers(0, 3)].copy()
        if abs(t[0, 1]) > abs(t[0, 0]):                 # long side along the road
            size[[0, 1]] = size[[1, 0]]
        box = Box(np.array([c2[0], c2[1], size[2] / 2]), size, rng.uniform(0.1, 0.9, 3))
        if np.any(box.lo[:2] < world.origin) or np.any(box.hi[:2] > world.upper):
            continue
        if any(np.all(np.abs(box.center[:2] - o.center[:2]) < (box.size[:2] + o.size[:2]) / 2 + 0.5)
               for o in occluders):
            continue
        # keep clear of the ego lane
        lane = offset_line(-2.5)
        gap = np.max(np.abs(lane - box.center[:2]) - box.size[:2] / 2, axis=1)
        if np.min(gap) < 0.8:
            continue
        # keep off painted elements so paint is occluded, not buried
        cell = np.mgrid[box.lo[0]:box.hi[0]:0.25, box.lo[1]:box.hi[1]:0.25].reshape(2, -1).T
        tmp = SceneSpec(world, dividers, crossings, boundaries)
        if np.any(paint_class(tmp, cell[:, 0], cell[:, 1]) != BACKGROUND):
            continue
        occluders.append(box)

    scene = SceneSpec(world, dividers, crossings, boundaries, occluders,
                      texture_seed=int(rng.integers(0, 2**31 - 1)), style=style,
                      name=name or f"{style}-{seed}")
    scene.validate()
    return scene
