"""Single-frame BEV model: pixel features, camera lifting, per-cell decoder.

Pixel features are seven hand-crafted channels (RGB, gradient magnitude,
3x3 mean RGB) followed by a learned 7->8 projection.  Lifting samples the
features bilinearly at the projection of every ego-frame voxel centre and
averages over the cameras that see the voxel.  A learned linear voxel
encoder then collapses each column: the 8-channel features of its z levels
(zeroed where no camera sees the level) are stacked and mapped to 16
channels.  A plain mean over levels is one particular setting of that map.

Everything up to the 16-channel BEV feature is affine in the raw pixel
channels, and camera averaging commutes with affine maps.  The geometric
part is therefore a fixed sparse matrix per camera rig (``LiftPlan``) applied
to the raw channels; the learned maps act afterwards on per-voxel means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from . import learn
from .geometry import GridSpec, bilinear_weights, project_points
from .maps import BEVFeatureMap, SemanticMap

log = logging.getLogger(__name__)

N_CLASSES = 4
RAW_CHANNELS = 7
IMG_CHANNELS = 8
BEV_CHANNELS = 16
BACKGROUND_LOGITS = np.array([10.0, 0.0, 0.0, 0.0])


def local_grid(dims=(100, 100, 12), cell_size: float = 0.5, z_min: float = -4.0) -> GridSpec:
    """Ego-centred voxel grid in frame-local coordinates (z relative to the sensors)."""
    return GridSpec((-dims[0] * cell_size / 2, -dims[1] * cell_size / 2, z_min), cell_size, dims)


# --------------------------------------------------------------------------
# pixel features

def raw_image_features(rgb: np.ndarray) -> np.ndarray:
    """Seven channels per pixel: RGB, gradient magnitude of grey level, 3x3 mean RGB."""
    rgb = np.asarray(rgb, dtype=np.float64)
    grey = rgb.mean(axis=-1)
    g0, g1 = np.gradient(grey)
    mag = np.hypot(g0, g1)
    box = ndimage.uniform_filter(rgb, size=(3, 3, 1), mode="nearest")
    return np.concatenate([rgb, mag[..., None], box], axis=-1)


def image_features(rgb: np.ndarray, params: "OnboardParams") -> np.ndarray:
    """Learned ``RAW_CHANNELS -> IMG_CHANNELS`` projection of the raw pixel channels."""
    raw = raw_image_features(rgb)
    return params.proj(raw.reshape(-1, RAW_CHANNELS)).reshape(raw.shape[:2] + (IMG_CHANNELS,))


# --------------------------------------------------------------------------
# lifting

@dataclass
class LiftPlan:
    """Sparse linear map from stacked camera pixels to per-voxel camera means."""

    grid: GridSpec                  # 3-D ego-local grid
    matrix: sparse.csr_matrix       # (X*Y*Z, K*H*W)
    coverage: np.ndarray            # (X, Y) bool: some level of the column is seen
    voxel_valid: np.ndarray         # (X, Y, Z) bool: seen by >= 1 camera

    @classmethod
    def build(cls, cameras, grid: GridSpec) -> "LiftPlan":
        X, Y, Z = grid.dims
        centers = grid.cell_centers().reshape(-1, 3)
        rows, cols, vals, per_cam = [], [], [], []
        offset = 0
        ncam = np.zeros(len(centers))
        for cam in cameras:
            u, v, _, ok = project_points(cam, centers)
            i0, i1, w, inside = bilinear_weights((cam.height, cam.width), v - 0.5, u - 0.5)
            ok = ok & inside
            ncam += ok
            per_cam.append((ok, i0 * cam.width + i1 + offset, w))
            offset += cam.height * cam.width
        for ok, pix, w in per_cam:
            r = np.flatnonzero(ok)
            rows.append(np.repeat(r, 4))
            cols.append(pix[ok].ravel())
            vals.append((w[ok] / ncam[ok][:, None]).ravel())
        m = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(len(centers), offset))
        m.sum_duplicates()
        valid = (ncam > 0).reshape(X, Y, Z)
        return cls(grid, m, valid.any(axis=2), valid)

    def lift_raw(self, images) -> np.ndarray:
        """Per-voxel camera mean of raw pixel channels, ``(X, Y, Z, RAW_CHANNELS)``; zero where unseen."""
        stack = np.concatenate([raw_image_features(im).reshape(-1, RAW_CHANNELS) for im in images])
        return np.asarray(self.matrix @ stack).reshape(tuple(self.grid.dims) + (RAW_CHANNELS,))


# --------------------------------------------------------------------------
# parameters

@dataclass
class OnboardParams:
    proj: learn.DenseNet        # 7 -> 8, linear
    zmap: learn.DenseNet        # Z*8 -> 16, linear voxel encoder
    decoder: learn.DenseNet     # 16 -> 32 -> 32 -> 4

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 32, zero: bool = False,
             n_levels: int = 12) -> "OnboardParams":
        return cls(
            learn.DenseNet.init([RAW_CHANNELS, IMG_CHANNELS], ["linear"], rng, zero),
            learn.DenseNet.init([n_levels * IMG_CHANNELS, BEV_CHANNELS], ["linear"], rng, zero),
            learn.DenseNet.init([BEV_CHANNELS, hidden, hidden, N_CLASSES], ["relu", "relu", "linear"], rng, zero),
        )

    @property
    def n_levels(self) -> int:
        return self.zmap.dims[0] // IMG_CHANNELS

    def nets(self) -> dict:
        return {"proj": self.proj, "zmap": self.zmap, "decoder": self.decoder}

    def params(self) -> dict:
        out = {}
        for name, net in self.nets().items():
            out.update(net.params(name + "."))
        return out

    def validate(self):
        for net in self.nets().values():
            net.validate()
        if self.proj.dims != [RAW_CHANNELS, IMG_CHANNELS] or self.zmap.dims[1] != BEV_CHANNELS \
                or self.zmap.dims[0] % IMG_CHANNELS or self.decoder.dims[0] != BEV_CHANNELS \
                or self.decoder.dims[-1] != N_CLASSES:
            raise ValueError("onboard network dims do not match the feature layout")

    def save(self, path):
        learn.save_checkpoint(path, self.nets())

    @classmethod
    def load(cls, path) -> "OnboardParams":
        nets = learn.load_checkpoint(path)
        missing = {"proj", "zmap", "decoder"} - set(nets)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks onboard nets {sorted(missing)}")
        out = cls(nets["proj"], nets["zmap"], nets["decoder"])
        out.validate()
        return out


def _column_features(raw: np.ndarray, valid: np.ndarray, params: OnboardParams) -> np.ndarray:
    """``(N, Z, 7)`` voxel means and ``(N, Z)`` validity -> ``(N, 16)``."""
    n, z = valid.shape
    w, b = params.proj.layers[0].weight, params.proj.layers[0].bias
    h = (raw.reshape(n * z, RAW_CHANNELS) @ w + b) * valid.reshape(-1, 1)
    return params.zmap(h.reshape(n, z * IMG_CHANNELS))


def features_from_raw(raw: np.ndarray, voxel_valid: np.ndarray, params: OnboardParams) -> np.ndarray:
    """16-channel BEV features from per-voxel raw means; zero on uncovered cells."""
    X, Y, Z = voxel_valid.shape
    if Z != params.n_levels:
        raise ValueError(f"grid has {Z} z levels, network expects {params.n_levels}")
    f = _column_features(raw.reshape(X * Y, Z, RAW_CHANNELS), voxel_valid.reshape(X * Y, Z), params)
    return np.where(voxel_valid.any(axis=2)[..., None], f.reshape(X, Y, BEV_CHANNELS), 0.0)


def lift_to_bev(images, plan: LiftPlan, params: OnboardParams) -> BEVFeatureMap:
    """BEV feature map of one frame from its K camera images.

    The grid is ego-local, so the frame pose does not enter: lifting depends
    only on the rig geometry and image content.
    """
    raw = plan.lift_raw(images)
    return BEVFeatureMap(plan.grid.as_2d(), features_from_raw(raw, plan.voxel_valid, params), plan.coverage.copy())


def lift_to_bev_direct(images, cameras, grid: GridSpec, params: OnboardParams) -> BEVFeatureMap:
    """Reference lifting without the affine shortcut: learned pixel features are
    sampled per voxel, averaged over cameras, stacked over z and encoded."""
    X, Y, Z = grid.dims
    centers = grid.cell_centers().reshape(-1, 3)
    acc = np.zeros((len(centers), IMG_CHANNELS))
    n = np.zeros(len(centers))
    for im, cam in zip(images, cameras):
        feat = image_features(im, params)
        u, v, _, ok = project_points(cam, centers)
        i0, i1, w, inside = bilinear_weights(feat.shape, v - 0.5, u - 0.5)
        ok = ok & inside
        s = np.einsum("nk,nkc->nc", w, feat[i0, i1])
        acc[ok] += s[ok]
        n[ok] += 1
    vox = np.where(n[:, None] > 0, acc / np.maximum(n, 1)[:, None], 0.0)
    f = params.zmap(vox.reshape(X * Y, Z * IMG_CHANNELS)).reshape(X, Y, BEV_CHANNELS)
    cov = (n > 0).reshape(X, Y, Z).any(axis=2)
    return BEVFeatureMap(grid.as_2d(), np.where(cov[..., None], f, 0.0), cov)


def decode(fmap: BEVFeatureMap, params: OnboardParams) -> SemanticMap:
    """Per-cell decoder; uncovered cells get background-certain logits."""
    if params is None:
        raise ValueError("decode needs trained onboard parameters")
    X, Y = fmap.coverage.shape
    logits = params.decoder(fmap.features.reshape(-1, BEV_CHANNELS)).reshape(X, Y, N_CLASSES)
    logits = np.where(fmap.coverage[..., None], logits, BACKGROUND_LOGITS)
    return SemanticMap(fmap.grid, logits, fmap.coverage.copy(), "logits")


def predict_from_raw(raw: np.ndarray, plan: LiftPlan, params: OnboardParams):
    """``(BEVFeatureMap, SemanticMap)`` of one frame from its lifted raw voxel means."""
    fmap = BEVFeatureMap(plan.grid.as_2d(), features_from_raw(raw, plan.voxel_valid, params),
                         plan.coverage.copy())
    return fmap, decode(fmap, params)


def predict_frame(images, plan: LiftPlan, params: OnboardParams):
    """``(BEVFeatureMap, SemanticMap)`` of one frame from its camera images."""
    return predict_from_raw(plan.lift_raw(images), plan, params)


# --------------------------------------------------------------------------
# training

@dataclass
class OnboardConfig:
    steps: int = 1500
    batch_cells: int = 4096
    lr: float = 3e-3
    weight_decay: float = 0.0
    focal_alpha: float = 1.0
    focal_gamma: float = 2.0
    hidden: int = 32
    seed: int = 0

    def validate(self):
        if self.steps < 0 or self.batch_cells < 1 or self.hidden < 1:
            raise ValueError("onboard config: steps >= 0, batch_cells >= 1, hidden >= 1 required")
        if not (self.lr > 0 and self.focal_alpha > 0 and self.focal_gamma >= 0 and self.weight_decay >= 0):
            raise ValueError("onboard config: lr, focal_alpha > 0 and focal_gamma, weight_decay >= 0 required")


@dataclass
class CellSamples:
    """Covered cells of many frames, flattened for training."""

    raw: np.ndarray         # (N, Z, 7) float32
    valid: np.ndarray       # (N, Z) bool
    labels: np.ndarray      # (N,) int

    @classmethod
    def collect(cls, raws, labels, plan: LiftPlan) -> "CellSamples":
        c = plan.coverage
        if len(raws) != len(labels):
            raise ValueError("one label map per frame is required")
        n = len(raws)
        return cls(np.concatenate([r[c] for r in raws]).astype(np.float32) if n else
                   np.zeros((0, plan.grid.dims[2], RAW_CHANNELS), np.float32),
                   np.tile(plan.voxel_valid[c], (n, 1)),
                   np.concatenate([l[c] for l in labels]).astype(np.int64) if n else np.zeros(0, np.int64))

    def __len__(self):
        return len(self.labels)


def _forward_loss(raw, valid, y, params: OnboardParams, leaves, cfg: OnboardConfig):
    n, z = valid.shape
    w = leaves["proj.0.w"] if leaves else learn.Value(params.proj.layers[0].weight)
    b = leaves["proj.0.b"] if leaves else learn.Value(params.proj.layers[0].bias)
    m = valid.reshape(-1, 1).astype(np.float64)
    # the bias only enters seen levels: unseen levels stay exactly zero
    h = learn.add(learn.matmul(raw.reshape(n * z, RAW_CHANNELS).astype(np.float64), w),
                  learn.matmul(m, learn.reshape(b, (1, IMG_CHANNELS))))
    h = learn.mul(h, np.repeat(m, IMG_CHANNELS, axis=1))
    h = params.zmap.forward(learn.reshape(h, (n, z * IMG_CHANNELS)), leaves, "zmap.")
    logits = params.decoder.forward(h, leaves, "decoder.")
    return learn.focal_loss(logits, y, cfg.focal_alpha, cfg.focal_gamma)


def train_onboard(samples: CellSamples, cfg: OnboardConfig, callback=None) -> OnboardParams:
    """Fit the projection, voxel encoder and decoder with focal loss over covered cells."""
    cfg.validate()
    if len(samples) == 0:
        raise ValueError("train_onboard needs at least one covered cell")
    rng = np.random.default_rng(cfg.seed)
    params = OnboardParams.init(rng, cfg.hidden, n_levels=samples.valid.shape[1])
    flat = params.params()
    state = learn.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    for step in range(cfg.steps):
        sel = rng.integers(0, len(samples), min(cfg.batch_cells, len(samples)))
        leaves = learn.leaves_for(flat)
        loss = _forward_loss(samples.raw[sel], samples.valid[sel], samples.labels[sel], params, leaves, cfg)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"onboard training diverged at step {step}")
        loss.backward()
        learn.adam_step(state, flat, {k: v.grad for k, v in leaves.items()})
        if callback is not None:
            callback(step, float(loss.data))
    return params


def onboard_loss(samples: CellSamples, params: OnboardParams, cfg: OnboardConfig) -> float:
    return float(_forward_loss(samples.raw, samples.valid, samples.labels, params, None, cfg).data)
