"""Per-cell fusion confidence and predicted divergence.

The network reads a frame's 16-channel BEV features plus six channels
encoded from geometric offsets: for every voxel of a column, the point where
the camera ray through the voxel terminates in the fitted radiance grid,
minus the voxel centre, in the frame's local axes.  A trunk feeds two heads,
a sigmoid confidence used as the fusion weight and a softplus estimate of
the divergence between the frame's prediction and the ground truth.

Training runs on short clips: the clip's frames are fused on the centre
frame's grid with their confidences, and the loss is the cross-entropy of
the fused map plus a weighted squared error on the predicted divergence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import learn
from .fusion import resampling
from .geometry import GridSpec, Pose, project_points, transform_point
from .maps import BEVFeatureMap, ConfidenceMap, SemanticMap
from .nerf import RadianceGrid, render_depth

log = logging.getLogger(__name__)

AUG_CHANNELS = 6
MIN_OPACITY = 0.1


# --------------------------------------------------------------------------
# geometric augmentation

@dataclass
class NerfAugmentation:
    """Per-voxel ray-termination offsets (local axes, metres) and validity."""

    offsets: np.ndarray     # (X, Y, Z, 3)
    valid: np.ndarray       # (X, Y, Z) bool

    def __post_init__(self):
        if self.offsets.shape != self.valid.shape + (3,):
            raise ValueError("offsets and validity flags disagree in shape")

    @property
    def n_levels(self) -> int:
        return self.valid.shape[2]

    def inputs(self) -> np.ndarray:
        """Encoder input per cell: 3Z offsets then Z flags, ``(X, Y, 4Z)``."""
        X, Y, Z = self.valid.shape
        off = np.where(self.valid[..., None], self.offsets, 0.0).reshape(X, Y, 3 * Z)
        return np.concatenate([off, self.valid.astype(np.float64)], axis=-1)


def select_cameras(cameras, points: np.ndarray):
    """Index of the in-frustum camera whose optical axis is closest to the ray
    towards each frame-local point, or -1 when no camera sees it."""
    best = np.full(len(points), -1)
    best_cos = np.full(len(points), -np.inf)
    for k, cam in enumerate(cameras):
        _, _, _, ok = project_points(cam, points)
        ray = points - cam.extrinsic.translation
        cos = ray @ cam.optical_axis / np.maximum(np.linalg.norm(ray, axis=-1), 1e-12)
        better = ok & (cos > best_cos)
        best[better] = k
        best_cos[better] = cos[better]
    return best


def delta_augmentation(grid: RadianceGrid, pose: Pose, cameras, local3d: GridSpec,
                       min_opacity: float = MIN_OPACITY, step: float | None = None) -> NerfAugmentation:
    """Ray-termination offsets for every voxel of a frame's local grid.

    Each voxel is assigned the camera chosen by ``select_cameras``; the ray
    from that camera centre through the voxel is rendered, and the expected
    termination point minus the voxel centre is rotated into local axes.
    Entries unseen by any camera or whose ray opacity is below
    ``min_opacity`` are zero with a false flag. Rays march at ``step``
    (default: one voxel), which is ample for voxel-resolution offsets.
    """
    if grid is None:
        raise ValueError("delta_augmentation needs a fitted radiance grid")
    step = grid.spec.cell_size if step is None else step
    grid = RadianceGrid(grid.spec, grid.raw, grid.t_near, grid.t_far, step, grid.background)
    X, Y, Z = local3d.dims
    centers = local3d.cell_centers().reshape(-1, 3)
    cam_idx = select_cameras(cameras, centers)
    valid = cam_idx >= 0
    offsets = np.zeros((len(centers), 3))
    if valid.any():
        origins = np.stack([c.extrinsic.translation for c in cameras])[cam_idx[valid]]
        d_local = centers[valid] - origins
        d_local /= np.linalg.norm(d_local, axis=-1, keepdims=True)
        o_w = transform_point(pose, origins, "forward")
        d_w = d_local @ pose.rotation.T
        depth, opac = render_depth(grid, o_w, d_w)
        term_local = origins + depth[:, None] * d_local
        off = term_local - centers[valid]
        keep = opac >= min_opacity
        off[~keep] = 0.0
        offsets[valid] = off
        valid[np.flatnonzero(valid)[~keep]] = False
    return NerfAugmentation(offsets.reshape(X, Y, Z, 3), valid.reshape(X, Y, Z))


# --------------------------------------------------------------------------
# network

@dataclass
class UncertaintyParams:
    encoder: learn.DenseNet     # 4Z -> 16 -> 6
    trunk: learn.DenseNet       # (C + 6) -> 32 -> 32
    conf_head: learn.DenseNet   # 32 -> 1, sigmoid
    kl_head: learn.DenseNet     # 32 -> 1, softplus

    @classmethod
    def init(cls, rng: np.random.Generator, feat_channels: int = 16, n_levels: int = 12,
             hidden: int = 32, enc_hidden: int = 16, zero: bool = False) -> "UncertaintyParams":
        return cls(
            learn.DenseNet.init([4 * n_levels, enc_hidden, AUG_CHANNELS], ["relu", "linear"], rng, zero),
            learn.DenseNet.init([feat_channels + AUG_CHANNELS, hidden, hidden], ["relu", "relu"], rng, zero),
            learn.DenseNet.init([hidden, 1], ["sigmoid"], rng, zero),
            learn.DenseNet.init([hidden, 1], ["softplus"], rng, zero),
        )

    def nets(self) -> dict:
        return {"encoder": self.encoder, "trunk": self.trunk, "conf_head": self.conf_head, "kl_head": self.kl_head}

    def params(self) -> dict:
        out = {}
        for name, net in self.nets().items():
            out.update(net.params(name + "."))
        return out

    def validate(self):
        for net in self.nets().values():
            net.validate()
        e, t = self.encoder.dims, self.trunk.dims
        if e[-1] != AUG_CHANNELS or e[0] % 4 or t[-1] != self.conf_head.dims[0] \
                or t[-1] != self.kl_head.dims[0] or self.conf_head.dims[-1] != 1 or self.kl_head.dims[-1] != 1:
            raise ValueError("uncertainty network dims do not chain")

    @property
    def feat_channels(self) -> int:
        return self.trunk.dims[0] - AUG_CHANNELS

    def save(self, path):
        learn.save_checkpoint(path, self.nets())

    @classmethod
    def load(cls, path) -> "UncertaintyParams":
        nets = learn.load_checkpoint(path)
        missing = {"encoder", "trunk", "conf_head", "kl_head"} - set(nets)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks uncertainty nets {sorted(missing)}")
        out = cls(nets["encoder"], nets["trunk"], nets["conf_head"], nets["kl_head"])
        out.validate()
        return out


def _heads(feat, aug_inputs, params: UncertaintyParams, leaves=None):
    """Tape forward for rows of cells: ``(confidence (N,1), KL^U (N,1))``."""
    n = feat.shape[0]
    if aug_inputs is None:
        enc = learn.Value(np.zeros((n, AUG_CHANNELS)))
    else:
        enc = params.encoder.forward(aug_inputs, leaves, "encoder.")
    h = params.trunk.forward(learn.concat([learn.as_value(feat), enc]), leaves, "trunk.")
    return params.conf_head.forward(h, leaves, "conf_head."), params.kl_head.forward(h, leaves, "kl_head.")


def cell_outputs(feat: np.ndarray, aug_inputs: np.ndarray | None, params: UncertaintyParams):
    """Tape-free per-row confidence and KL^U, each ``(N,)``."""
    feat = np.asarray(feat, dtype=np.float64)
    if aug_inputs is None:
        enc = np.zeros((feat.shape[0], AUG_CHANNELS))
    else:
        enc = params.encoder(np.asarray(aug_inputs, dtype=np.float64))
    h = params.trunk(np.concatenate([feat, enc], axis=-1))
    return params.conf_head(h)[:, 0], params.kl_head(h)[:, 0]


def confidence_forward(fmap: BEVFeatureMap, aug: NerfAugmentation | None, params: UncertaintyParams):
    """``(ConfidenceMap, KL^U map)``; ``aug=None`` feeds zero geometric channels.

    Uncovered cells get confidence 0 and KL^U 0.
    """
    X, Y, C = fmap.features.shape
    if C != params.feat_channels:
        raise ValueError(f"feature map has {C} channels, network expects {params.feat_channels}")
    inputs = None
    if aug is not None:
        if aug.valid.shape[:2] != (X, Y):
            raise ValueError("augmentation grid does not match the feature map")
        inputs = aug.inputs().reshape(X * Y, -1)
    conf, klu = cell_outputs(fmap.features.reshape(X * Y, C), inputs, params)
    cov = fmap.coverage
    conf = np.where(cov, conf.reshape(X, Y), 0.0)
    klu = np.where(cov, klu.reshape(X, Y), 0.0)
    return ConfidenceMap(fmap.grid, conf, cov.copy()), klu


# --------------------------------------------------------------------------
# divergence targets and losses

def true_kl(sem: SemanticMap, labels: np.ndarray) -> np.ndarray:
    """``KL(onehot(gt) || p) = -ln p_gt`` per covered cell; 0 elsewhere."""
    p = sem.probabilities()
    pg = np.take_along_axis(p, labels[..., None].astype(np.int64), axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        kl = -np.log(pg)
    return np.where(sem.coverage, kl, 0.0)


def kl_loss(klu, klg, coverage=None):
    """Mean squared difference of predicted and true divergence over covered cells.

    Works on arrays, or on a tape Value ``klu`` with array ``klg`` (rows of covered cells).
    """
    if isinstance(klu, learn.Value):
        d = learn.sub(klu, np.asarray(klg, dtype=np.float64).reshape(klu.shape))
        return learn.mean(learn.mul(d, d))
    klu = np.asarray(klu, dtype=np.float64)
    klg = np.asarray(klg, dtype=np.float64)
    cov = np.ones(klu.shape, bool) if coverage is None else coverage
    if not cov.any():
        return 0.0
    return float(np.mean((klg[cov] - klu[cov]) ** 2))


# --------------------------------------------------------------------------
# training

@dataclass
class FrameRecord:
    """Frozen onboard output of one frame plus what the offboard stages attach."""

    grid: GridSpec              # local 2-D grid
    pose: Pose
    features: np.ndarray        # (X, Y, C)
    probs: np.ndarray           # (X, Y, 4)
    coverage: np.ndarray        # (X, Y) bool
    aug: np.ndarray | None = None       # (X, Y, 4Z) encoder inputs
    labels: np.ndarray | None = None    # (X, Y) local ground truth

    @property
    def semantic(self) -> SemanticMap:
        return SemanticMap(self.grid, self.probs, self.coverage, "probs")

    @property
    def feature_map(self) -> BEVFeatureMap:
        return BEVFeatureMap(self.grid, self.features, self.coverage)


@dataclass
class UncertaintyConfig:
    steps: int = 600
    clip_len: int = 5
    batch_cells: int = 2048
    lr: float = 1e-3
    ce_weight: float = 1.0
    kl_weight: float = 0.1
    use_nerf: bool = True
    hidden: int = 32
    enc_hidden: int = 16
    seed: int = 0

    def validate(self):
        if self.steps < 0 or self.clip_len < 1 or self.batch_cells < 1:
            raise ValueError("uncertainty config: steps >= 0, clip_len >= 1, batch_cells >= 1 required")
        if not (self.lr > 0 and self.ce_weight >= 0 and self.kl_weight >= 0):
            raise ValueError("uncertainty config: lr > 0 and loss weights >= 0 required")


@dataclass
class ClipBatch:
    """Rows of source cells and their bilinear footprints on the target cells."""

    feat: np.ndarray            # (R, C)
    aug: np.ndarray | None      # (R, 4Z)
    klg: np.ndarray             # (R,)
    index: list                 # per frame (T, 4) row indices
    weights: list               # per frame (T, 4), zero where the frame does not reach
    p_gt: list                  # per frame (T,) resampled probability of the target's class


def clip_batch(frames, centre: int, target_cells: np.ndarray, use_nerf: bool) -> ClipBatch:
    """Assemble the fusion problem of one clip on chosen cells of the centre frame."""
    c = frames[centre]
    X, Y = c.coverage.shape
    local = c.grid.cell_centers().reshape(-1, 2)[target_cells]
    world = transform_point(c.pose, np.concatenate([local, np.zeros((len(local), 1))], -1), "forward")
    gt = c.labels.reshape(-1)[target_cells]
    T = len(target_cells)
    feats, augs, klgs, index, weights, pgt = [], [], [], [], [], []
    offset = 0
    reach = np.zeros(T, bool)
    for f in frames:
        rs = resampling(f.grid, f.coverage, f.pose, world)
        uniq, inv = np.unique(rs.source, return_inverse=True)
        inv = inv.reshape(rs.source.shape)
        feats.append(f.features.reshape(X * Y, -1)[uniq])
        if use_nerf:
            augs.append(f.aug.reshape(X * Y, -1)[uniq])
        probs = f.probs.reshape(X * Y, -1)
        lab = f.labels.reshape(-1)[uniq]
        klgs.append(-np.log(np.maximum(probs[uniq, lab], 1e-300)))
        idx = np.zeros((T, 4), np.int64)
        w = np.zeros((T, 4))
        idx[rs.target] = inv + offset
        w[rs.target] = rs.weights
        pg = np.zeros(T)
        pg[rs.target] = np.sum(probs[rs.source, gt[rs.target][:, None]] * rs.weights, axis=1)
        reach[rs.target] = True
        index.append(idx)
        weights.append(w)
        pgt.append(pg)
        offset += len(uniq)
    keep = np.flatnonzero(reach)
    return ClipBatch(np.concatenate(feats), np.concatenate(augs) if use_nerf else None, np.concatenate(klgs),
                     [i[keep] for i in index], [w[keep] for w in weights], [p[keep] for p in pgt])


def clip_loss(batch: ClipBatch, params: UncertaintyParams, cfg: UncertaintyConfig, leaves=None):
    """``ce_weight * CE(fused) + kl_weight * L_KL`` on the tape."""
    conf, klu = _heads(batch.feat, batch.aug, params, leaves)
    num = den = None
    for idx, w, pg in zip(batch.index, batch.weights, batch.p_gt):
        cs = learn.weighted_sum(conf, idx, w)
        term = learn.mul(cs, pg.reshape(-1, 1))
        num = term if num is None else learn.add(num, term)
        den = cs if den is None else learn.add(den, cs)
    fused = learn.div(num, learn.add(den, 1e-12))
    ce = learn.mul(learn.mean(learn.log(learn.add(fused, 1e-12))), -1.0)
    loss = learn.mul(ce, cfg.ce_weight)
    if cfg.kl_weight:
        loss = learn.add(loss, learn.mul(kl_loss(klu, batch.klg), cfg.kl_weight))
    return loss


def _clip_range(n: int, centre: int, m: int):
    lo = max(0, min(centre - m // 2, n - m))
    return lo, min(n, lo + m)


def train_uncertainty(sequences, cfg: UncertaintyConfig, callback=None) -> UncertaintyParams:
    """Fit the network on clips drawn from ``sequences`` (lists of FrameRecord with labels)."""
    cfg.validate()
    seqs = [s for s in sequences if len(s)]
    if not seqs:
        raise ValueError("train_uncertainty needs at least one non-empty sequence")
    for s in seqs:
        for f in s:
            if f.labels is None or (cfg.use_nerf and f.aug is None):
                raise ValueError("training frames need labels (and augmentation when use_nerf)")
    rng = np.random.default_rng(cfg.seed)
    f0 = seqs[0][0]
    n_levels = f0.aug.shape[-1] // 4 if f0.aug is not None else 12
    params = UncertaintyParams.init(rng, f0.features.shape[-1], n_levels, cfg.hidden, cfg.enc_hidden)
    flat = params.params()
    state = learn.AdamState(lr=cfg.lr)
    for step in range(cfg.steps):
        seq = seqs[rng.integers(len(seqs))]
        centre = int(rng.integers(len(seq)))
        lo, hi = _clip_range(len(seq), centre, cfg.clip_len)
        frames = seq[lo:hi]
        covered = np.flatnonzero(seq[centre].coverage.reshape(-1))
        cells = np.sort(rng.choice(covered, min(cfg.batch_cells, len(covered)), replace=False))
        batch = clip_batch(frames, centre - lo, cells, cfg.use_nerf)
        leaves = learn.leaves_for(flat)
        loss = clip_loss(batch, params, cfg, leaves)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"uncertainty training diverged at step {step}")
        loss.backward()
        learn.adam_step(state, flat, {k: v.grad for k, v in leaves.items() if v.grad is not None})
        if callback is not None:
            callback(step, float(loss.data))
    return params
