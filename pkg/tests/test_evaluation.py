import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvmap import evaluation as ev
from mvmap.geometry import GridSpec, Pose
from mvmap.maps import ConfidenceMap, SemanticMap

G = GridSpec((0.0, 0.0), 0.5, (8, 6))


def labels_map(lab, cov=None):
    return SemanticMap.from_labels(G, np.asarray(lab), coverage=cov)


def test_iou_hand_counted():
    gt = np.zeros((8, 6), int)
    gt[2:5, 1:3] = 1                      # 6 divider cells
    pred = np.zeros((8, 6), int)
    pred[3:6, 1:3] = 1                    # 6 cells, 4 shared
    r = ev.evaluate(labels_map(pred), labels_map(gt))
    assert r.ious[0] == pytest.approx(4 / 8)
    assert r.ious[1] == 1.0 and r.ious[2] == 1.0     # absent from both
    assert r.miou == pytest.approx((0.5 + 1 + 1) / 3)


def test_uncovered_cells_do_not_count():
    gt = np.zeros((8, 6), int)
    gt[:, 0] = 3
    cov = np.ones((8, 6), bool)
    cov[:, 0] = False
    r = ev.evaluate(labels_map(np.zeros((8, 6), int), cov), labels_map(gt))
    assert r.ious[2] == 1.0


def test_crop_selects_a_sub_region():
    gt = np.zeros((8, 6), int)
    gt[0, 0] = 2
    crop = G.crop((2, 2), (8, 6))
    assert ev.iou(labels_map(np.zeros((8, 6), int)), labels_map(gt), 2, crop) == 1.0
    assert ev.iou(labels_map(np.zeros((8, 6), int)), labels_map(gt), 2) == 0.0
    with pytest.raises(ValueError):
        ev.iou_counts(labels_map(gt), labels_map(gt), GridSpec((0.25, 0.0), 0.5, (2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_iou_bounds_and_self_agreement(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 4, (8, 6))
    b = rng.integers(0, 4, (8, 6))
    r = ev.evaluate(labels_map(a), labels_map(b))
    assert all(0 <= v <= 1 for v in r.ious)
    assert ev.evaluate(labels_map(a), labels_map(a)).miou == 1.0


def test_range_presets_centre_and_clamp():
    world = GridSpec((0.0, 0.0), 0.5, (160, 160))
    r = ev.range_presets(world)
    assert r["short"].dims == (120, 60)
    np.testing.assert_allclose(r["short"].origin, [10.0, 25.0])
    assert r["long"].dims == (160, 160) and r["long"].origin == world.origin
    off = ev.range_presets(world, center=(2.0, 78.0))
    assert off["short"].origin == (0.0, 50.0)


def test_report_validation():
    with pytest.raises(ValueError):
        ev.EvalReport((0.5, 0.5, 0.5), 0.6, "long", 1, "m", "s")
    with pytest.raises(ValueError):
        ev.EvalReport((1.5, 0.5, 0.5), 2.5 / 3, "long", 1, "m", "s")
    m = ev.mean_report([ev.EvalReport((0.2, 0.4, 0.6), 0.4, "long", 1, "a", "s1"),
                        ev.EvalReport((0.4, 0.4, 0.4), 0.4, "long", 1, "a", "s2")],
                       range_preset="long", frames=1, mode="a", scene="mean")
    np.testing.assert_allclose(m.ious, [0.3, 0.4, 0.5])


def test_csv_leaves_out_timing_unless_asked():
    r = ev.EvalReport((0.2, 0.4, 0.6), 0.4, "long", 1, "a", "s1", wall_time=1.234)
    assert "wall_time" not in ev.reports_csv([r]).splitlines()[0]
    assert "wall_time" in ev.reports_csv([r], timing=True).splitlines()[0]


def test_pearson_matches_closed_form():
    x = np.arange(10.0)
    assert ev.pearson(x, 3 * x + 1) == (pytest.approx(1.0), True)
    assert ev.pearson(x, -x)[0] == pytest.approx(-1.0)
    assert ev.pearson(x, np.ones(10)) == (0.0, False)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert ev.pearson(a, b)[0] == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)


def test_confidence_summary_counts_only_frames_with_both_sets():
    cov = np.ones((2, 2), bool)
    occ = np.array([[True, False], [False, False]])
    vis = ~occ
    conf_low = np.array([[0.1, 0.9], [0.9, 0.9]])
    conf_high = np.array([[0.95, 0.9], [0.9, 0.9]])
    klu = np.array([[1.0, 2.0], [3.0, 4.0]])
    frames = [(klu, klu * 2, conf_low, cov, occ, vis), (klu, klu, conf_high, cov, occ, vis),
              (klu, klu, conf_low, cov, np.zeros((2, 2), bool), vis)]
    s = ev.kl_confidence_analysis(frames)
    assert s.pooled_r == pytest.approx(np.corrcoef(np.tile(klu.ravel(), 3),
                                                   np.concatenate([2 * klu.ravel(), klu.ravel(), klu.ravel()]))[0, 1])
    assert len(s.occlusion_frames) == 2
    assert s.occluded_lower_fraction == 0.5


def pack(n=6, seed=0):
    rng = np.random.default_rng(seed)
    world = GridSpec((0.0, 0.0), 0.5, (30, 30))
    local = GridSpec((-3.0, -3.0), 0.5, (12, 12))
    gt = rng.integers(0, 4, (30, 30))
    sems, poses, confs = [], [], []
    for i in range(n):
        pose = Pose.from_yaw(0.0, (5.0 + i, 7.5, 1.5))
        c = local.cell_centers() + pose.translation[:2]
        lab = gt[(c[..., 0] / 0.5).astype(int), (c[..., 1] / 0.5).astype(int)]
        noisy = rng.random(local.dims) < 0.4
        lab = np.where(noisy, rng.integers(0, 4, local.dims), lab)
        sems.append(SemanticMap(local, 4.0 * np.eye(4)[lab], np.ones(local.dims, bool)))
        poses.append(pose)
        confs.append(ConfidenceMap(local, np.where(noisy, 0.05, 1.0), np.ones(local.dims, bool)))
    return ev.ScenePack("toy", sems, poses, SemanticMap.from_labels(world, gt), {"oracle": confs})


def test_fusion_experiments_on_a_toy_scene():
    p = pack()
    crop = None
    single = ev.single_frame_report(p, crop)
    avg = ev.fused_report(p, "average", crop)
    oracle = ev.fused_report(p, "oracle", crop)
    assert oracle.miou > avg.miou > single.miou
    table, reports = ev.frame_scaling_experiment([p], (1, 3, 6), ("average", "oracle"), "long",
                                                 {"toy": {"long": None}})
    assert len(table["oracle"]) == 3 and len(reports) == 6
    assert table["oracle"][-1] == pytest.approx(oracle.miou)
    text, per_scene, summary = ev.ablation_suite(
        [p], {"single": "onboard", "avg": "average", "oracle": "oracle"}, ("long",), {"toy": {"long": None}})
    assert summary["oracle"]["long"].miou == pytest.approx(oracle.miou)
    assert text.count("\n") == 5
    # a stored fused map is used for the all-frame case
    p.fused["average"] = ev.fused_map(p, "oracle")
    assert ev.fused_report(p, "average", crop).miou == pytest.approx(oracle.miou)


def test_svg_and_scaling_csv():
    svg = ev.svg_curves([1, 5, 10], {"a": [1.0, 2.0, 3.0], "b": [2.0, 2.0, 2.0]})
    assert svg.startswith("<svg") and svg.count("<polyline") == 2
    csv = ev.scaling_csv((1, 5), {"a": [0.1, 0.2]})
    assert csv.splitlines() == ["frames,a", "1,0.100000", "5,0.200000"]
