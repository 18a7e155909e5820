"""Metrics and experiment harness.

IoU is computed from argmax labels over the cells the prediction covers.
A class absent from both prediction and ground truth inside the evaluated
region scores 1.  Scene-level numbers pool cell counts over the region (and
over frames for single-frame evaluation); multi-scene numbers average the
per-scene values.
"""

from __future__ import annotations

import csv
import io as _io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import GridSpec
from .maps import SemanticMap

FOREGROUND = (1, 2, 3)
CLASS_LABELS = ("divider", "crossing", "boundary")


# --------------------------------------------------------------------------
# regions and IoU

def _region_slices(grid: GridSpec, crop: GridSpec | None):
    if crop is None:
        return slice(None), slice(None)
    lo = np.rint((np.asarray(crop.origin) - np.asarray(grid.origin)) / grid.cell_size).astype(int)
    if abs(crop.cell_size - grid.cell_size) > 1e-12 or np.any(lo < 0) \
            or np.any(lo + np.asarray(crop.dims) > np.asarray(grid.dims)):
        raise ValueError("crop is not an aligned sub-region of the grid")
    if not np.allclose(lo * grid.cell_size + np.asarray(grid.origin), crop.origin, atol=1e-9):
        raise ValueError("crop origin is not on a cell boundary")
    return slice(lo[0], lo[0] + crop.dims[0]), slice(lo[1], lo[1] + crop.dims[1])


def _check_aligned(pred: SemanticMap, gt: SemanticMap):
    if pred.grid.dims != gt.grid.dims or not pred.grid.aligned_with(gt.grid):
        raise ValueError("prediction and ground truth grids are misaligned")


def iou_counts(pred: SemanticMap, gt: SemanticMap, crop: GridSpec | None = None, classes=FOREGROUND):
    """Intersection and union cell counts per class over covered cells of the region."""
    _check_aligned(pred, gt)
    sx, sy = _region_slices(pred.grid, crop)
    cov = pred.coverage[sx, sy]
    pl = pred.labels()[sx, sy]
    gl = gt.labels()[sx, sy]
    inter = np.array([np.sum((pl == k) & (gl == k) & cov) for k in classes], dtype=np.int64)
    union = np.array([np.sum(((pl == k) | (gl == k)) & cov) for k in classes], dtype=np.int64)
    return inter, union


def ious_from_counts(inter, union) -> np.ndarray:
    inter = np.asarray(inter, dtype=np.float64)
    union = np.asarray(union, dtype=np.float64)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def iou(pred: SemanticMap, gt: SemanticMap, cls: int, crop: GridSpec | None = None) -> float:
    """IoU of one class; 1.0 when the class is absent from both maps in the region."""
    i, u = iou_counts(pred, gt, crop, (cls,))
    return float(ious_from_counts(i, u)[0])


def range_presets(world: GridSpec, center=None, short=(60.0, 30.0), long=(100.0, 100.0)) -> dict:
    """Axis-aligned crops of ``world`` centred on ``center`` (default: world centre).

    Each crop is clamped to the world; a crop larger than the world is the
    whole world.  Sizes are rounded to whole cells.
    """
    c = (np.asarray(world.origin) + world.extent / 2.0) if center is None else np.asarray(center, float)[:2]
    out = {}
    for name, size in (("short", short), ("long", long)):
        n = np.minimum(np.rint(np.asarray(size, float) / world.cell_size).astype(int), world.dims)
        lo = np.rint((c - np.asarray(world.origin)) / world.cell_size - n / 2.0).astype(int)
        lo = np.clip(lo, 0, np.asarray(world.dims) - n)
        origin = np.asarray(world.origin) + lo * world.cell_size
        out[name] = GridSpec(tuple(origin), world.cell_size, tuple(int(v) for v in n))
    return out


# --------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    ious: tuple                 # divider, crossing, boundary
    miou: float
    range_preset: str = "long"
    frames: int = 1
    mode: str = ""
    scene: str = ""
    wall_time: float = 0.0
    note: str = ""

    def __post_init__(self):
        self.ious = tuple(float(v) for v in self.ious)
        if any(not (0.0 <= v <= 1.0) for v in self.ious):
            raise ValueError("IoU values must lie in [0, 1]")
        if abs(self.miou - float(np.mean(self.ious))) > 1e-12:
            raise ValueError("mIoU must be the mean of the foreground IoUs")

    @classmethod
    def from_counts(cls, inter, union, **kw) -> "EvalReport":
        v = ious_from_counts(inter, union)
        return cls(tuple(v), float(np.mean(v)), **kw)

    def row(self) -> dict:
        d = asdict(self)
        d.update({f"iou_{n}": v for n, v in zip(CLASS_LABELS, self.ious)})
        del d["ious"]
        return d


def evaluate(pred: SemanticMap, gt: SemanticMap, crop: GridSpec | None = None, **kw) -> EvalReport:
    t = time.perf_counter()
    i, u = iou_counts(pred, gt, crop)
    kw.setdefault("wall_time", time.perf_counter() - t)
    return EvalReport.from_counts(i, u, **kw)


def mean_report(reports, **kw) -> EvalReport:
    """Scene average of per-scene reports."""
    v = np.mean([r.ious for r in reports], axis=0)
    return EvalReport(tuple(v), float(np.mean(v)), wall_time=sum(r.wall_time for r in reports), **kw)


def reports_csv(reports, timing: bool = False) -> str:
    """CSV of report rows; wall times are left out unless ``timing`` so that the
    file is reproducible bit for bit."""
    rows = [r.row() for r in reports]
    if not timing:
        for r in rows:
            del r["wall_time"]
    if not rows:
        return ""
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def text_table(headers, rows) -> str:
    """Markdown-style table of preformatted cells."""
    cells = [[str(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    line = lambda r: "| " + " | ".join(s.ljust(w) for s, w in zip(r, widths)) + " |"
    out = [line(headers), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [line(r) for r in cells]
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# statistics

def pearson(a, b):
    """``(r, defined)``; a constant input gives ``(0.0, False)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError("pearson needs equally sized inputs")
    if a.size < 2:
        return 0.0, False
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.sum(da * da))
    sb = np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        return 0.0, False
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0)), True


@dataclass
class FrameConfidenceStats:
    frame: int
    r: float
    r_defined: bool
    conf_occluded: float        # NaN when the frame has no occluded covered cells
    conf_visible: float
    n_occluded: int
    n_visible: int


def frame_confidence_stats(index: int, klu, klg, conf, coverage, occluded, visible) -> FrameConfidenceStats:
    cov = np.asarray(coverage, bool)
    r, ok = pearson(np.asarray(klu)[cov], np.asarray(klg)[cov])
    occ = cov & occluded
    vis = cov & visible
    co = float(np.mean(conf[occ])) if occ.any() else float("nan")
    cv = float(np.mean(conf[vis])) if vis.any() else float("nan")
    return FrameConfidenceStats(index, r, ok, co, cv, int(occ.sum()), int(vis.sum()))


@dataclass
class ConfidenceSummary:
    pooled_r: float
    pooled_defined: bool
    frames: list = field(default_factory=list)

    @property
    def occlusion_frames(self) -> list:
        return [f for f in self.frames if f.n_occluded > 0 and f.n_visible > 0]

    @property
    def occluded_lower_fraction(self) -> float:
        fs = self.occlusion_frames
        if not fs:
            return float("nan")
        return float(np.mean([f.conf_occluded < f.conf_visible for f in fs]))


# --------------------------------------------------------------------------
# plots

_SVG_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def svg_curves(x, curves: dict, xlabel: str = "frames", ylabel: str = "mIoU (%)",
               width: int = 480, height: int = 320) -> str:
    """Standalone SVG line plot; ``curves`` maps a label to y values aligned with ``x``."""
    x = np.asarray(x, dtype=np.float64)
    ys = np.concatenate([np.asarray(v, float) for v in curves.values()]) if curves else np.zeros(1)
    lo, hi = float(np.nanmin(ys)), float(np.nanmax(ys))
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    ml, mr, mt, mb = 56, 16, 16, 44
    xmin, xmax = float(x.min()), float(x.max()) if x.max() > x.min() else float(x.min()) + 1
    sx = lambda v: ml + (v - xmin) / (xmax - xmin) * (width - ml - mr)
    sy = lambda v: height - mb - (v - lo) / (hi - lo) * (height - mt - mb)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>']
    for v in x:
        out.append(f'<text x="{sx(v):.1f}" y="{height - mb + 14}" text-anchor="middle">{v:g}</text>')
    for v in np.linspace(lo, hi, 5):
        out.append(f'<text x="{ml - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{(ml + width - mr) / 2:.0f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{(mt + height - mb) / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {(mt + height - mb) / 2:.0f})">{ylabel}</text>')
    for i, (name, ys_) in enumerate(curves.items()):
        col = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, ys_))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>')
        for a, b in zip(x, ys_):
            out.append(f'<circle cx="{sx(a):.1f}" cy="{sy(b):.1f}" r="3" fill="{col}"/>')
        out.append(f'<text x="{ml + 10}" y="{mt + 14 * (i + 1)}" fill="{col}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# experiments over loaded artifacts

@dataclass
class ScenePack:
    """Frozen per-frame outputs of one scene plus its world ground truth."""

    name: str
    semantics: list             # per-frame SemanticMap (local grid)
    poses: list                 # per-frame Pose
    gt: SemanticMap             # world grid
    confidences: dict = field(default_factory=dict)   # mode -> per-frame ConfidenceMap list
    fused: dict = field(default_factory=dict)         # mode -> stored all-frame fused map

    def crops(self, short=(60.0, 30.0), long=(100.0, 100.0)) -> dict:
        return range_presets(self.gt.grid, None, short, long)


def fused_map(pack: ScenePack, mode: str, n: int | None = None) -> SemanticMap:
    """Fuse the first ``n`` frames; ``mode`` is ``"average"`` or a key of ``pack.confidences``."""
    from .fusion import GlobalMapAccumulator, accumulate_frame, finalize

    k = len(pack.semantics) if n is None else min(n, len(pack.semantics))
    if k == len(pack.semantics) and mode in pack.fused:
        return pack.fused[mode]
    confs = None if mode == "average" else pack.confidences[mode]
    acc = GlobalMapAccumulator.empty(pack.gt.grid)
    pts = acc.target_points()
    for i in range(k):
        accumulate_frame(acc, pack.semantics[i], None if confs is None else confs[i], pack.poses[i], pts)
    return finalize(acc)


def single_frame_report(pack: ScenePack, crop: GridSpec | None, range_name: str = "long") -> EvalReport:
    """Onboard baseline: every frame resampled alone onto the world grid, counts pooled."""
    from .fusion import GlobalMapAccumulator, accumulate_frame, finalize

    t = time.perf_counter()
    inter = np.zeros(3, np.int64)
    union = np.zeros(3, np.int64)
    pts = None
    for sem, pose in zip(pack.semantics, pack.poses):
        acc = GlobalMapAccumulator.empty(pack.gt.grid)
        pts = acc.target_points() if pts is None else pts
        m = finalize(accumulate_frame(acc, sem, None, pose, pts))
        i, u = iou_counts(m, pack.gt, crop)
        inter += i
        union += u
    return EvalReport.from_counts(inter, union, range_preset=range_name, frames=len(pack.semantics),
                                  mode="onboard", scene=pack.name, wall_time=time.perf_counter() - t)


def fused_report(pack: ScenePack, mode: str, crop: GridSpec | None, range_name: str = "long",
                 n: int | None = None) -> EvalReport:
    t = time.perf_counter()
    m = fused_map(pack, mode, n)
    k = len(pack.semantics) if n is None else min(n, len(pack.semantics))
    r = evaluate(m, pack.gt, crop, range_preset=range_name, frames=k, mode=mode, scene=pack.name)
    r.wall_time = time.perf_counter() - t
    return r


def frame_scaling_experiment(packs, counts, modes, range_name: str = "long", ranges=None):
    """Scene-averaged mIoU when fusing the first ``n`` frames, per mode and count.

    Returns ``(table, reports)``: ``table[mode]`` is a list of mIoU values
    aligned with ``counts``.
    """
    table, reports = {}, []
    for mode in modes:
        vals = []
        for n in counts:
            rs = []
            for p in packs:
                crop = (ranges or {}).get(p.name, p.crops())[range_name]
                rs.append(fused_report(p, mode, crop, range_name, n))
            reports += rs
            vals.append(mean_report(rs, range_preset=range_name, frames=n, mode=mode, scene="mean").miou)
        table[mode] = vals
    return table, reports


def scaling_csv(counts, table: dict) -> str:
    lines = ["frames," + ",".join(table)]
    for i, n in enumerate(counts):
        lines.append(f"{n}," + ",".join(f"{table[m][i]:.6f}" for m in table))
    return "\n".join(lines) + "\n"


def ablation_suite(packs, variants, range_names=("short", "long"), ranges=None):
    """Table of onboard, average fusion and each confidence variant.

    ``variants`` is an ordered mapping ``row label -> mode`` where mode is
    ``"onboard"``, ``"average"`` or a confidence key shared by all packs.
    Returns ``(text table, per-scene reports, {label: {range: mean report}})``.
    """
    per_scene, summary = [], {}
    for label, mode in variants.items():
        summary[label] = {}
        for rn in range_names:
            rs = []
            for p in packs:
                crop = (ranges or {}).get(p.name, p.crops())[rn]
                r = single_frame_report(p, crop, rn) if mode == "onboard" else fused_report(p, mode, crop, rn)
                r.note = label
                rs.append(r)
            per_scene += rs
            summary[label][rn] = mean_report(rs, range_preset=rn, frames=len(packs[0].semantics),
                                             mode=mode, scene="mean", note=label)
    headers = ["method"] + [f"{n} {rn}" for rn in range_names for n in CLASS_LABELS] + \
              [f"mIoU {rn}" for rn in range_names]
    rows = []
    for label in variants:
        row = [label]
        for rn in range_names:
            row += [f"{100 * v:.2f}" for v in summary[label][rn].ious]
        row += [f"{100 * summary[label][rn].miou:.2f}" for rn in range_names]
        rows.append(row)
    return text_table(headers, rows), per_scene, summary


def kl_confidence_analysis(frames) -> ConfidenceSummary:
    """Correlation of predicted and true divergence, and confidence on occluded
    versus visible cells.

    ``frames`` yields ``(klu, klg, conf, coverage, occluded, visible)`` per
    held-out frame.  The pooled correlation is over covered cells of all frames.
    """
    stats, all_u, all_g = [], [], []
    for i, (klu, klg, conf, cov, occ, vis) in enumerate(frames):
        stats.append(frame_confidence_stats(i, klu, klg, conf, cov, occ, vis))
        all_u.append(np.asarray(klu)[cov])
        all_g.append(np.asarray(klg)[cov])
    if stats:
        r, ok = pearson(np.concatenate(all_u), np.concatenate(all_g))
    else:
        r, ok = 0.0, False
    return ConfidenceSummary(r, ok, stats)
