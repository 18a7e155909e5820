"""Staged offboard pipeline over an artifact directory.

Stages communicate only through files under the artifact root::

    scenes/sceneN/   scene.json, poses.txt, rgb/*.ppm, depth/*.mvra,
                     labels/*.mvra (local ground truth), vis/*.mvra, gt_world.mvra
    nerf/sceneN/     tv.mvxg, notv.mvxg, render/
    onboard/         params.mvck, sceneN/feat_*.mvra, sceneN/sem_*.mvra
    uncertainty/     <variant>.mvck
    fuse/sceneN/     conf_<variant>_*.mvra, map_<mode>.mvra, map_<mode>.ppm
    reports/         eval, ablation, scaling and confidence reports
    plots/           rendered maps and curves
    manifest.jsonl   one line per stage run

The confidence variants are the ablation rows: ``nokl`` (features only,
cross-entropy only), ``kl`` (adds the divergence loss), ``nerf`` (adds
geometric offsets from grids fitted without the vertical regulariser) and
``mvmap`` (offsets from regularised grids).
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import io
from . import nerf as nf
from . import onboard as ob
from . import scene as sc
from . import uncertainty as un
from .config import PipelineConfig
from .fusion import colorize, fuse_sequence
from .geometry import GridSpec, pixel_grid_rays, transform_point
from .maps import ConfidenceMap, SemanticMap, softmax

log = logging.getLogger(__name__)

VARIANTS = {
    "nokl": {"use_nerf": False, "use_kl": False, "grid": None},
    "kl": {"use_nerf": False, "use_kl": True, "grid": None},
    "nerf": {"use_nerf": True, "use_kl": True, "grid": "notv"},
    "mvmap": {"use_nerf": True, "use_kl": True, "grid": "tv"},
}
FUSION_MODES = ("average",) + tuple(VARIANTS)
ABLATION_ROWS = {
    "Onboard model": "onboard",
    "Average fusion": "average",
    "Uncertainty w/o KL loss": "nokl",
    "Uncertainty + KL loss": "kl",
    "+ NeRF augmentation": "nerf",
    "+ TV loss (full model)": "mvmap",
}
STAGE_ORDER = ("synth", "train-nerf", "render-nerf", "train-onboard", "infer-onboard",
               "train-uncertainty", "fuse", "eval", "ablate", "scale-frames", "plot")


class MissingArtifact(FileNotFoundError):
    pass


class ArtifactMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# layout

@dataclass
class Layout:
    root: Path

    def scene_dir(self, sid) -> Path:
        return self.root / "scenes" / f"scene{sid}"

    def scene_json(self, sid):
        return self.scene_dir(sid) / "scene.json"

    def poses(self, sid):
        return self.scene_dir(sid) / "poses.txt"

    def rgb(self, sid, i, k):
        return self.scene_dir(sid) / "rgb" / f"f{i:03d}_c{k}.ppm"

    def depth(self, sid, i, k):
        return self.scene_dir(sid) / "depth" / f"f{i:03d}_c{k}.mvra"

    def labels(self, sid, i):
        return self.scene_dir(sid) / "labels" / f"f{i:03d}.mvra"

    def vis(self, sid, i):
        return self.scene_dir(sid) / "vis" / f"f{i:03d}.mvra"

    def gt_world(self, sid):
        return self.scene_dir(sid) / "gt_world.mvra"

    def grid(self, sid, kind):
        return self.root / "nerf" / f"scene{sid}" / f"{kind}.mvxg"

    def nerf_render(self, sid):
        return self.root / "nerf" / f"scene{sid}" / "render"

    @property
    def onboard_params(self):
        return self.root / "onboard" / "params.mvck"

    def feat(self, sid, i):
        return self.root / "onboard" / f"scene{sid}" / f"feat_{i:03d}.mvra"

    def sem(self, sid, i):
        return self.root / "onboard" / f"scene{sid}" / f"sem_{i:03d}.mvra"

    def un_params(self, variant):
        return self.root / "uncertainty" / f"{variant}.mvck"

    def conf(self, sid, variant, i):
        return self.root / "fuse" / f"scene{sid}" / f"conf_{variant}_{i:03d}.mvra"

    def fused(self, sid, mode):
        return self.root / "fuse" / f"scene{sid}" / f"map_{mode}.mvra"

    def fused_ppm(self, sid, mode):
        return self.root / "fuse" / f"scene{sid}" / f"map_{mode}.ppm"

    @property
    def reports(self):
        return self.root / "reports"

    @property
    def plots(self):
        return self.root / "plots"


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# context

@dataclass
class Context:
    cfg: PipelineConfig
    layout: Layout
    scene_filter: tuple | None = None
    strict: bool = False

    def __post_init__(self):
        self.inputs: list = []
        self.outputs: list = []
        self._recorded = None

    def _pick(self, ids):
        if self.scene_filter is None:
            return tuple(ids)
        return tuple(i for i in ids if i in self.scene_filter)

    @property
    def train_scenes(self):
        return self._pick(self.cfg.scene.train)

    @property
    def test_scenes(self):
        return self._pick(self.cfg.scene.test)

    @property
    def all_scenes(self):
        return self.train_scenes + self.test_scenes

    @property
    def rig(self):
        s = self.cfg.scene
        return sc.default_rig(s.width, s.height, s.hfov)

    def need(self, *paths) -> list:
        """Record inputs; fail on the first missing one."""
        out = []
        for p in paths:
            p = Path(p)
            if not p.exists():
                raise MissingArtifact(f"missing artifact: {p}")
            if self.strict:
                self._check_hash(p)
            self.inputs.append(p)
            out.append(p)
        return out

    def wrote(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def _check_hash(self, p: Path):
        """Under ``strict``, an input must match the hash its producing stage recorded."""
        if self._recorded is None:
            self._recorded = {}
            for rec in io.read_manifest(self.layout.root):
                self._recorded.update(rec.get("outputs", {}))
        rel = str(p.relative_to(self.layout.root))
        if rel not in self._recorded:
            raise ArtifactMismatch(f"no recorded hash for input {rel}")
        if io.file_hash(p) != self._recorded[rel]:
            raise ArtifactMismatch(f"hash mismatch for input {rel}")


# --------------------------------------------------------------------------
# loaders

def load_scene(ctx: Context, sid):
    ctx.need(ctx.layout.scene_json(sid), ctx.layout.poses(sid))
    return sc.SceneSpec.load(ctx.layout.scene_json(sid)), io.read_poses(ctx.layout.poses(sid))


def load_images(ctx: Context, sid, i, n_cams):
    paths = ctx.need(*[ctx.layout.rgb(sid, i, k) for k in range(n_cams)])
    return [io.read_ppm(p).astype(np.float64) / 255.0 for p in paths]


def load_depths(ctx: Context, sid, i, n_cams):
    paths = ctx.need(*[ctx.layout.depth(sid, i, k) for k in range(n_cams)])
    return [io.read_raster(p)[1][..., 0].astype(np.float64) for p in paths]


def load_labels(ctx: Context, sid, i):
    return io.read_raster(ctx.need(ctx.layout.labels(sid, i))[0])[1][..., 0].astype(np.int64)


def load_semantic(ctx: Context, sid, i) -> SemanticMap:
    grid, data, cov = io.read_raster(ctx.need(ctx.layout.sem(sid, i))[0])
    return SemanticMap(grid, data.astype(np.float64), cov, "logits")


def load_record(ctx: Context, sid, i, pose, with_labels: bool) -> un.FrameRecord:
    grid, feat, cov = io.read_raster(ctx.need(ctx.layout.feat(sid, i))[0])
    if not grid.aligned_with(ob.local_grid().as_2d()):
        raise ArtifactMismatch(f"{ctx.layout.feat(sid, i)}: grid does not match the local BEV grid")
    sem = load_semantic(ctx, sid, i)
    labels = load_labels(ctx, sid, i) if with_labels else None
    return un.FrameRecord(grid, pose, feat, softmax(sem.scores), cov, None, labels)


def load_confidence(ctx: Context, sid, variant, i):
    grid, data, cov = io.read_raster(ctx.need(ctx.layout.conf(sid, variant, i))[0])
    return ConfidenceMap(grid, data[..., 0].astype(np.float64), cov), data[..., 1].astype(np.float64)


def load_gt_world(ctx: Context, sid) -> SemanticMap:
    grid, data, _ = io.read_raster(ctx.need(ctx.layout.gt_world(sid))[0])
    return SemanticMap.from_labels(grid, data[..., 0].astype(np.int64))


def load_grid(ctx: Context, sid, kind) -> nf.RadianceGrid:
    return nf.load_grid(ctx.need(ctx.layout.grid(sid, kind))[0])


def pixel_grid(h, w) -> GridSpec:
    """Grid used to store per-pixel rasters (axis 0 = rows)."""
    return GridSpec((0.0, 0.0), 1.0, (h, w))


# --------------------------------------------------------------------------
# stages

def stage_synth(ctx: Context):
    """Render scenes, poses, per-frame labels and visibility."""
    cfg = ctx.cfg.scene
    local2d = ob.local_grid().as_2d()
    for sid in ctx.all_scenes:
        scene = sc.default_scene(sid, cfg.style, name=f"scene{sid}")
        traj = sc.make_trajectory(scene, cfg.style, cfg.n_frames, ctx.cfg.stage_seed("scene", sid),
                                  cameras=ctx.rig)
        lay = ctx.layout
        scene.save(ctx.wrote(_mkparent(lay.scene_json(sid))))
        io.write_poses(ctx.wrote(lay.poses(sid)), traj.frame_poses)
        cells = local2d.cell_centers().reshape(-1, 2)
        cells = np.concatenate([cells, np.zeros((len(cells), 1))], -1)
        for i, pose in enumerate(traj.frame_poses):
            for k, cam in enumerate(traj.cameras):
                rgb, depth = sc.render_frame(scene, pose, cam)
                io.write_ppm(ctx.wrote(_mkparent(lay.rgb(sid, i, k))), rgb)
                io.write_raster(ctx.wrote(_mkparent(lay.depth(sid, i, k))), pixel_grid(*depth.shape), depth)
            labels = sc.gt_local_labels(scene, pose, local2d)
            io.write_raster(ctx.wrote(_mkparent(lay.labels(sid, i))), local2d, labels, "u8")
            world_pts = transform_point(pose, cells, "forward")
            world_pts[:, 2] = 0.0
            in_view, visible = sc.ground_visibility(scene, pose, traj.cameras, world_pts)
            vis = (in_view.astype(np.uint8) + 2 * visible.astype(np.uint8)).reshape(local2d.dims)
            io.write_raster(ctx.wrote(_mkparent(lay.vis(sid, i))), local2d, vis, "u8")
        gt = sc.gt_labels(scene, scene.world)
        io.write_raster(ctx.wrote(lay.gt_world(sid)), scene.world, gt, "u8")
        log.info("synth scene%s: %d frames", sid, len(traj))


def _ray_dataset(ctx: Context, sid, poses):
    K = len(ctx.rig)
    imgs = [load_images(ctx, sid, i, K) for i in range(len(poses))]
    deps = [load_depths(ctx, sid, i, K) for i in range(len(poses))] if ctx.cfg.nerf.use_depth else None
    if deps is not None:
        deps = [[np.where(np.isfinite(d), d, np.nan) for d in f] for f in deps]
    return nf.RayDataset.from_frames(imgs, deps, poses, ctx.rig)


def stage_train_nerf(ctx: Context):
    """Fit radiance grids with and without the vertical regulariser."""
    for sid in ctx.all_scenes:
        scene, poses = load_scene(ctx, sid)
        data = _ray_dataset(ctx, sid, poses)
        base = dataclasses.replace(ctx.cfg.nerf, seed=ctx.cfg.stage_seed("nerf", sid))
        spec = nf.scene_grid_spec(scene.world, float(poses[0].translation[2]), base)
        for kind, cfg in (("tv", base), ("notv", dataclasses.replace(base, lambda_tv=0.0))):
            t = time.perf_counter()
            grid = nf.fit_scene(data, spec, cfg)
            nf.save_grid(ctx.wrote(_mkparent(ctx.layout.grid(sid, kind))), grid)
            log.info("nerf scene%s %s: %.1fs", sid, kind, time.perf_counter() - t)


def ground_covered_columns(scene, poses, cameras) -> np.ndarray:
    """World cells whose ground centre falls inside some camera frustum of the sequence."""
    c = scene.world.cell_centers().reshape(-1, 2)
    pts = np.concatenate([c, np.zeros((len(c), 1))], -1)
    seen = np.zeros(len(pts), bool)
    for pose in poses:
        in_view, _ = sc.ground_visibility(scene.without_occluders(), pose, cameras, pts)
        seen |= in_view
    return seen.reshape(scene.world.dims)


def stage_render_nerf(ctx: Context):
    """Render fitted grids, report ground depth error and column peakedness."""
    K = len(ctx.rig)
    depth_lines = ["scene,frame,camera,median_abs_ground_depth_error,ground_pixels"]
    tv_lines = ["scene,peakedness_tv,peakedness_notv,columns"]
    for sid in ctx.all_scenes:
        scene, poses = load_scene(ctx, sid)
        grid = load_grid(ctx, sid, "tv")
        out = ctx.layout.nerf_render(sid)
        out.mkdir(parents=True, exist_ok=True)
        for i in sorted({0, len(poses) // 2}):
            depths = load_depths(ctx, sid, i, K)
            for k, cam in enumerate(ctx.rig):
                rgb, depth, _ = nf.render_image(grid, cam, poses[i])
                io.write_ppm(ctx.wrote(out / f"f{i:03d}_c{k}.ppm"), rgb)
                io.write_raster(ctx.wrote(out / f"f{i:03d}_c{k}_depth.mvra"), pixel_grid(*depth.shape), depth)
                o, d = pixel_grid_rays(cam, poses[i])
                _, kind, _ = sc.ray_cast(scene, o.reshape(-1, 3), d.reshape(-1, 3))
                # ground hits inside the reconstructed volume
                hit = o + np.where(np.isfinite(depths[k]), depths[k], 0.0)[..., None] * d
                m = ((kind.reshape(depth.shape) == sc.GROUND) & (depths[k] <= grid.t_far)
                     & scene.world.contains(hit[..., :2]))
                err = float(np.median(np.abs(depth - depths[k])[m])) if m.any() else float("nan")
                depth_lines.append(f"scene{sid},{i},{k},{err:.6f},{int(m.sum())}")
        cols = ground_covered_columns(scene, poses, ctx.rig)
        g_nt = load_grid(ctx, sid, "notv")
        # both grids share the spec; columns are indexed on the world footprint
        if tuple(g_nt.spec.dims[:2]) != cols.shape or tuple(grid.spec.dims[:2]) != cols.shape:
            raise ArtifactMismatch(f"scene{sid}: radiance grid footprint does not match the world grid")
        tv_lines.append(f"scene{sid},{nf.column_peakedness(grid, cols):.8f},"
                        f"{nf.column_peakedness(g_nt, cols):.8f},{int(cols.sum())}")
    _write(ctx, "nerf_depth.csv", "\n".join(depth_lines) + "\n")
    _write(ctx, "nerf_tv.csv", "\n".join(tv_lines) + "\n")


def stage_train_onboard(ctx: Context):
    """Train the single-frame BEV model on the training scenes."""
    plan = ob.LiftPlan.build(ctx.rig, ob.local_grid())
    K = len(ctx.rig)
    raws, labels = [], []
    for sid in ctx.train_scenes:
        _, poses = load_scene(ctx, sid)
        for i in range(len(poses)):
            raws.append(plan.lift_raw(load_images(ctx, sid, i, K))[plan.coverage].astype(np.float32))
            labels.append(load_labels(ctx, sid, i)[plan.coverage])
    if not raws:
        raise MissingArtifact("missing artifact: no training scenes selected")
    samples = ob.CellSamples(np.concatenate(raws), np.tile(plan.voxel_valid[plan.coverage], (len(raws), 1)),
                             np.concatenate(labels))
    del raws
    cfg = dataclasses.replace(ctx.cfg.onboard, seed=ctx.cfg.stage_seed("onboard"))
    params = ob.train_onboard(samples, cfg)
    params.save(ctx.wrote(_mkparent(ctx.layout.onboard_params)))


def stage_infer_onboard(ctx: Context):
    """Write per-frame features and semantics for all scenes."""
    params = ob.OnboardParams.load(ctx.need(ctx.layout.onboard_params)[0])
    plan = ob.LiftPlan.build(ctx.rig, ob.local_grid())
    K = len(ctx.rig)
    for sid in ctx.all_scenes:
        _, poses = load_scene(ctx, sid)
        for i in range(len(poses)):
            fmap, sem = ob.predict_frame(load_images(ctx, sid, i, K), plan, params)
            io.write_raster(ctx.wrote(_mkparent(ctx.layout.feat(sid, i))), fmap.grid, fmap.features,
                            coverage=fmap.coverage)
            io.write_raster(ctx.wrote(ctx.layout.sem(sid, i)), sem.grid, sem.scores, coverage=sem.coverage)


def _augment(ctx: Context, records, grid: nf.RadianceGrid):
    local3d = ob.local_grid()
    for r in records:
        aug = un.delta_augmentation(grid, r.pose, ctx.rig, local3d)
        r.aug = aug.inputs().astype(np.float32)


def _variant_config(ctx: Context, variant: str) -> un.UncertaintyConfig:
    v = VARIANTS[variant]
    base = ctx.cfg.uncertainty
    return dataclasses.replace(base, use_nerf=v["use_nerf"], kl_weight=base.kl_weight if v["use_kl"] else 0.0,
                               seed=ctx.cfg.stage_seed("uncertainty"))


def stage_train_uncertainty(ctx: Context):
    """Train the confidence network variants on clips."""
    seqs = {}
    for sid in ctx.train_scenes:
        _, poses = load_scene(ctx, sid)
        seqs[sid] = [load_record(ctx, sid, i, p, True) for i, p in enumerate(poses)]
    if not seqs:
        raise MissingArtifact("missing artifact: no training scenes selected")
    for variant, v in VARIANTS.items():
        if v["grid"] is not None:
            for sid, recs in seqs.items():
                _augment(ctx, recs, load_grid(ctx, sid, v["grid"]))
        t = time.perf_counter()
        params = un.train_uncertainty(list(seqs.values()), _variant_config(ctx, variant))
        params.save(ctx.wrote(_mkparent(ctx.layout.un_params(variant))))
        log.info("uncertainty %s: %.1fs", variant, time.perf_counter() - t)


class _FusionFrame:
    __slots__ = ("semantic", "pose", "index")

    def __init__(self, semantic, pose, index):
        self.semantic = semantic
        self.pose = pose
        self.index = index


def _stream(ctx: Context, sid, poses):
    """Frames loaded from disk one at a time."""
    for i, pose in enumerate(poses):
        yield _FusionFrame(load_semantic(ctx, sid, i), pose, i)


def stage_fuse(ctx: Context):
    """Predict confidences and fuse test scenes into global maps."""
    for sid in ctx.test_scenes:
        scene, poses = load_scene(ctx, sid)
        records = [load_record(ctx, sid, i, p, False) for i, p in enumerate(poses)]
        for variant, v in VARIANTS.items():
            params = un.UncertaintyParams.load(ctx.need(ctx.layout.un_params(variant))[0])
            grid = load_grid(ctx, sid, v["grid"]) if v["grid"] else None
            for i, r in enumerate(records):
                aug = un.delta_augmentation(grid, r.pose, ctx.rig, ob.local_grid()) if grid is not None else None
                conf, klu = un.confidence_forward(r.feature_map, aug, params)
                io.write_raster(ctx.wrote(_mkparent(ctx.layout.conf(sid, variant, i))), conf.grid,
                                np.stack([conf.weights, klu], -1), coverage=conf.coverage)
        del records
        for mode in FUSION_MODES:
            conf_fn = None if mode == "average" else (lambda f, m=mode: load_confidence(ctx, sid, m, f.index)[0])
            fused = fuse_sequence(_stream(ctx, sid, poses), scene.world,
                                  "average" if mode == "average" else "mvmap", conf_fn)
            io.write_raster(ctx.wrote(ctx.layout.fused(sid, mode)), fused.grid, fused.scores,
                            coverage=fused.coverage)
            io.write_ppm(ctx.wrote(ctx.layout.fused_ppm(sid, mode)), colorize(fused))


def _pack(ctx: Context, sid, confidences=(), fused=()):
    _, poses = load_scene(ctx, sid)
    pack = ev.ScenePack(f"scene{sid}", [load_semantic(ctx, sid, i) for i in range(len(poses))],
                        poses, load_gt_world(ctx, sid))
    for mode in confidences:
        pack.confidences[mode] = [load_confidence(ctx, sid, mode, i)[0] for i in range(len(poses))]
    for mode in fused:
        grid, data, cov = io.read_raster(ctx.need(ctx.layout.fused(sid, mode))[0])
        pack.fused[mode] = SemanticMap(grid, data.astype(np.float64), cov, "probs")
    return pack


def _ranges(ctx: Context, pack):
    e = ctx.cfg.eval
    return pack.crops(e.short_range, e.long_range)


def _write(ctx: Context, rel: str, text: str) -> Path:
    path = _mkparent(ctx.layout.reports / rel)
    path.write_text(text)
    return ctx.wrote(path)


def stage_eval(ctx: Context):
    """IoU reports and divergence/confidence analysis."""
    packs = [_pack(ctx, sid, fused=FUSION_MODES) for sid in ctx.test_scenes]
    if not packs:
        raise MissingArtifact("missing artifact: no test scenes selected")
    reports, summary = [], []
    for rn in ("short", "long"):
        for mode in ("onboard",) + FUSION_MODES:
            rs = []
            for p in packs:
                crop = _ranges(ctx, p)[rn]
                r = ev.single_frame_report(p, crop, rn) if mode == "onboard" else ev.fused_report(p, mode, crop, rn)
                rs.append(r)
            reports += rs
            summary.append(ev.mean_report(rs, range_preset=rn, frames=len(packs[0].semantics), mode=mode,
                                          scene="mean"))
    _write(ctx, "eval.csv", ev.reports_csv(reports + summary))
    world = packs[0].gt.grid
    note = ("long range covers the whole world" if world.extent.max() < max(ctx.cfg.eval.long_range) else "")
    rows = [[r.mode, r.range_preset] + [f"{100 * v:.2f}" for v in r.ious] + [f"{100 * r.miou:.2f}"]
            for r in summary]
    _write(ctx, "eval.txt", ev.text_table(["mode", "range", *ev.CLASS_LABELS, "mIoU"], rows)
           + (f"\n{note}\n" if note else ""))

    # divergence and confidence analysis on held-out frames
    lines = ["scene,frame,pearson_r,r_defined,conf_occluded,conf_visible,n_occluded,n_visible"]
    frames_all = []
    for sid, p in zip(ctx.test_scenes, packs):
        panels = ctx.layout.reports / "panels"
        panels.mkdir(parents=True, exist_ok=True)
        items = []
        for i, sem in enumerate(p.semantics):
            conf, klu = load_confidence(ctx, sid, "mvmap", i)
            klg = un.true_kl(sem, load_labels(ctx, sid, i))
            vis = io.read_raster(ctx.need(ctx.layout.vis(sid, i))[0])[1][..., 0]
            in_view, visible = (vis & 1) > 0, (vis & 2) > 0
            items.append((klu, klg, conf.weights, conf.coverage, in_view & ~visible, in_view & visible))
            if i % 10 == 0:
                top = float(np.percentile(klg[conf.coverage], 99)) if conf.coverage.any() else 1.0
                io.write_ppm(ctx.wrote(panels / f"scene{sid}_f{i:03d}_klu.ppm"), io.grey_panel(klu, conf.coverage, top))
                io.write_ppm(ctx.wrote(panels / f"scene{sid}_f{i:03d}_klg.ppm"), io.grey_panel(klg, conf.coverage, top))
                io.write_ppm(ctx.wrote(panels / f"scene{sid}_f{i:03d}_conf.ppm"),
                             io.grey_panel(conf.weights, conf.coverage, 1.0))
        s = ev.kl_confidence_analysis(items)
        for f in s.frames:
            lines.append(f"scene{sid},{f.frame},{f.r:.6f},{int(f.r_defined)},{f.conf_occluded:.6f},"
                         f"{f.conf_visible:.6f},{f.n_occluded},{f.n_visible}")
        frames_all += items
    pooled = ev.kl_confidence_analysis(frames_all)
    _write(ctx, "kl_confidence.csv", "\n".join(lines) + "\n")
    _write(ctx, "kl_confidence.txt",
           f"pooled_pearson_r = {pooled.pooled_r:.6f}\n"
           f"pooled_r_defined = {int(pooled.pooled_defined)}\n"
           f"frames_with_occlusion = {len(pooled.occlusion_frames)}\n"
           f"occluded_lower_fraction = {pooled.occluded_lower_fraction:.6f}\n")


def stage_ablate(ctx: Context):
    """Ablation table over fusion variants."""
    packs = [_pack(ctx, sid, fused=FUSION_MODES) for sid in ctx.test_scenes]
    if not packs:
        raise MissingArtifact("missing artifact: no test scenes selected")
    ranges = {p.name: _ranges(ctx, p) for p in packs}
    table, per_scene, summary = ev.ablation_suite(packs, ABLATION_ROWS, ranges=ranges)
    _write(ctx, "ablation.txt", table)
    _write(ctx, "ablation.csv", ev.reports_csv(per_scene + [summary[l][rn] for l in summary for rn in summary[l]]))


def stage_scale_frames(ctx: Context):
    """mIoU against the number of fused frames."""
    packs = [_pack(ctx, sid, confidences=("mvmap",)) for sid in ctx.test_scenes]
    if not packs:
        raise MissingArtifact("missing artifact: no test scenes selected")
    counts = tuple(ctx.cfg.eval.frame_counts)
    ranges = {p.name: _ranges(ctx, p) for p in packs}
    table, reports = ev.frame_scaling_experiment(packs, counts, ("average", "mvmap"),
                                                 ctx.cfg.eval.primary_range, ranges)
    _write(ctx, "scaling.csv", ev.scaling_csv(counts, table))
    _write(ctx, "scaling_runs.csv", ev.reports_csv(reports))
    _write(ctx, "scaling.svg", ev.svg_curves(counts, {k: 100 * np.asarray(v) for k, v in table.items()}))


def stage_plot(ctx: Context):
    """Render global maps and curves."""
    out = ctx.layout.plots
    out.mkdir(parents=True, exist_ok=True)
    for sid in ctx.test_scenes:
        gt = load_gt_world(ctx, sid)
        io.write_ppm(ctx.wrote(out / f"scene{sid}_gt.ppm"), colorize(gt))
        for mode in FUSION_MODES:
            grid, data, cov = io.read_raster(ctx.need(ctx.layout.fused(sid, mode))[0])
            io.write_ppm(ctx.wrote(out / f"scene{sid}_{mode}.ppm"),
                         colorize(SemanticMap(grid, data.astype(np.float64), cov, "probs")))
    csv_path = ctx.need(ctx.layout.reports / "scaling.csv")[0]
    rows = [l.split(",") for l in csv_path.read_text().splitlines()]
    counts = [int(r[0]) for r in rows[1:]]
    curves = {name: [100 * float(r[j + 1]) for r in rows[1:]] for j, name in enumerate(rows[0][1:])}
    (out / "scaling.svg").write_text(ev.svg_curves(counts, curves))
    ctx.wrote(out / "scaling.svg")


STAGES = {
    "synth": stage_synth,
    "train-nerf": stage_train_nerf,
    "render-nerf": stage_render_nerf,
    "train-onboard": stage_train_onboard,
    "infer-onboard": stage_infer_onboard,
    "train-uncertainty": stage_train_uncertainty,
    "fuse": stage_fuse,
    "eval": stage_eval,
    "ablate": stage_ablate,
    "scale-frames": stage_scale_frames,
    "plot": stage_plot,
}


def run_stage(name: str, cfg: PipelineConfig, root, scenes=None, strict: bool = False) -> dict:
    """Run one stage and append its manifest line; returns the manifest record."""
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, Layout(root), tuple(scenes) if scenes else None, strict)
    t = time.perf_counter()
    STAGES[name](ctx)
    rel = lambda ps: sorted({str(p.relative_to(root)) for p in ps})
    record = {
        "command": name,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "scenes": list(ctx.all_scenes),
        "inputs": {p: io.file_hash(root / p) for p in rel(ctx.inputs)},
        "outputs": {p: io.file_hash(root / p) for p in rel(ctx.outputs)},
        "wall_time": round(time.perf_counter() - t, 3),
    }
    io.append_manifest(root, record)
    return record


def run_all(cfg: PipelineConfig, root, scenes=None, strict: bool = False) -> list:
    return [run_stage(s, cfg, root, scenes, strict) for s in STAGE_ORDER]
