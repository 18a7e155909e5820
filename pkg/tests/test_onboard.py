import numpy as np
import pytest

from mvmap import learn
from mvmap import onboard as ob
from mvmap.geometry import make_camera
from mvmap.scene import default_rig


@pytest.fixture(scope="module")
def small():
    cams = default_rig(32, 24, 100.0)
    grid = ob.local_grid((24, 20, 12), 1.0)
    rng = np.random.default_rng(0)
    images = [rng.random((24, 32, 3)) for _ in cams]
    params = ob.OnboardParams.init(np.random.default_rng(1))
    params.proj.layers[0].bias[:] = rng.normal(size=8)
    return cams, grid, images, params


def test_lift_plan_matches_direct_lifting(small):
    cams, grid, images, params = small
    plan = ob.LiftPlan.build(cams, grid)
    fast = ob.lift_to_bev(images, plan, params)
    ref = ob.lift_to_bev_direct(images, cams, grid, params)
    np.testing.assert_array_equal(fast.coverage, ref.coverage)
    np.testing.assert_allclose(fast.features, ref.features, atol=1e-10)
    assert fast.features.shape == (24, 20, ob.BEV_CHANNELS)
    assert np.all(fast.features[~fast.coverage] == 0)


def test_coverage_follows_the_rig():
    grid = ob.local_grid()
    plan = ob.LiftPlan.build(default_rig(), grid)
    idx = lambda x, y: tuple(grid.as_2d().cell_index([x, y]))
    assert plan.coverage[idx(10.0, 0.0)] and plan.coverage[idx(-10.0, 0.0)]
    assert not plan.coverage[idx(0.0, 20.0)]          # beside the car, between the two frustums
    single = ob.LiftPlan.build([make_camera(128, 96, 100.0, pitch=np.radians(12))], grid)
    assert not single.coverage[idx(-10.0, 0.0)]
    # each voxel row averages cameras: rows of the lifting matrix sum to one where seen
    sums = np.asarray(plan.matrix.sum(axis=1)).ravel().reshape(grid.dims)
    np.testing.assert_allclose(sums[plan.voxel_valid], 1.0, atol=1e-12)
    assert np.all(sums[~plan.voxel_valid] == 0)


def test_decode_marks_uncovered_as_background(small):
    cams, grid, images, params = small
    fmap, sem = ob.predict_frame(images, ob.LiftPlan.build(cams, grid), params)
    assert np.all(sem.labels()[~sem.coverage] == 0)
    np.testing.assert_allclose(sem.probabilities().sum(-1), 1.0)


def test_training_loss_gradient(small):
    rng = np.random.default_rng(2)
    n, z = 6, 12
    raw = rng.random((n, z, ob.RAW_CHANNELS))
    valid = rng.random((n, z)) > 0.3
    y = rng.integers(0, 4, n)
    params = ob.OnboardParams.init(np.random.default_rng(3), hidden=5)
    cfg = ob.OnboardConfig()
    flat = params.params()
    leaves = learn.leaves_for(flat)
    ob._forward_loss(raw, valid, y, params, leaves, cfg).backward()
    for key in ("proj.0.w", "proj.0.b", "zmap.0.w", "decoder.2.b"):
        p = flat[key]
        num = learn.numeric_grad(lambda: float(ob._forward_loss(raw, valid, y, params, None, cfg).data), p)
        assert learn.rel_error(leaves[key].grad, num) < 1e-5, key


def test_unseen_levels_do_not_affect_features(small):
    _, _, _, params = small
    rng = np.random.default_rng(4)
    raw = rng.random((3, 12, ob.RAW_CHANNELS))
    valid = np.ones((3, 12), bool)
    valid[:, 8:] = False
    a = ob._column_features(raw, valid, params)
    raw[:, 8:] = 99.0
    np.testing.assert_array_equal(ob._column_features(raw, valid, params), a)


def toy_samples(n=600, seed=5):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, n)
    raw = rng.normal(0, 0.05, (n, 12, ob.RAW_CHANNELS))
    raw[:, :6, 0] += y[:, None] * 0.3          # class shows in the lower levels
    return ob.CellSamples(raw.astype(np.float32), np.ones((n, 12), bool), y)


def test_training_reduces_loss_and_is_deterministic():
    s = toy_samples()
    cfg = ob.OnboardConfig(steps=150, batch_cells=256, lr=1e-2)
    init = ob.OnboardParams.init(np.random.default_rng(cfg.seed), cfg.hidden)
    losses = []
    p1 = ob.train_onboard(s, cfg, lambda i, l: losses.append(l))
    p2 = ob.train_onboard(s, cfg)
    assert ob.onboard_loss(s, p1, cfg) < 0.5 * ob.onboard_loss(s, init, cfg)
    for a, b in zip(p1.params().values(), p2.params().values()):
        assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        ob.train_onboard(ob.CellSamples(s.raw[:0], s.valid[:0], s.labels[:0]), cfg)


def test_params_roundtrip_and_validation(tmp_path):
    p = ob.OnboardParams.init(np.random.default_rng(0))
    p.save(tmp_path / "p.mvck")
    q = ob.OnboardParams.load(tmp_path / "p.mvck")
    for a, b in zip(p.params().values(), q.params().values()):
        assert a.tobytes() == b.tobytes()
    learn.save_checkpoint(tmp_path / "bad.mvck", {"proj": p.proj, "zmap": p.zmap,
                                                   "decoder": learn.DenseNet.init([16, 3], ["linear"], np.random.default_rng(0))})
    with pytest.raises(ValueError):
        ob.OnboardParams.load(tmp_path / "bad.mvck")
    with pytest.raises(ValueError):
        ob.features_from_raw(np.zeros((2, 2, 5, 7)), np.ones((2, 2, 5), bool), p)


def test_config_validation():
    with pytest.raises(ValueError):
        ob.OnboardConfig(lr=0).validate()
    with pytest.raises(ValueError):
        ob.OnboardConfig(batch_cells=0).validate()
