import time

import numpy as np
import pytest

from mvmap import nerf as nf
from mvmap.geometry import GridSpec, Pose, Ray, make_camera, pixel_grid_rays
from mvmap.learn import numeric_grad, rel_error


def constant_grid(sigma, step=0.05, dims=(10, 10, 10)):
    spec = GridSpec((0.0, 0.0, 0.0), 1.0, dims)
    dens = np.full(dims, np.log(np.expm1(sigma)))       # softplus inverse
    col = np.zeros(dims + (3,))
    return nf.RadianceGrid.from_arrays(spec, dens, col, step=step)


@pytest.mark.parametrize("sigma, length", [(1.0, 1.0), (0.5, 3.0), (2.0, 0.7)])
def test_constant_density_opacity_closed_form(sigma, length):
    grid = constant_grid(sigma)
    t0 = time.perf_counter()
    rgb, depth, opac = nf.render_ray(grid, Ray([1.0, 5.0, 5.0], [1.0, 0.0, 0.0], 0.0, length))
    assert time.perf_counter() - t0 < 1.0
    assert opac == pytest.approx(1 - np.exp(-sigma * length), rel=1e-4)
    # expected termination depth of a homogeneous slab (unnormalized); midpoint
    # sampling puts each sample at the interval centre, an O(step^2) quadrature error
    exact = (1 - (1 + sigma * length) * np.exp(-sigma * length)) / sigma
    assert depth == pytest.approx(exact, rel=5e-3)
    # colour: sigmoid(0) = 0.5 blended with the background
    np.testing.assert_allclose(rgb, 0.5 * opac + (1 - opac) * grid.background, rtol=1e-4)


def test_unit_optical_depth_reference_value():
    _, _, opac = nf.render_ray(constant_grid(1.0), Ray([1.0, 2.0, 2.0], [0, 1.0, 0], 0.0, 1.0))
    assert opac == pytest.approx(0.63212, rel=1e-4)


def test_composite_reference_matches_kernel_samples():
    sig = np.array([0.1, 2.0, 0.5])
    rgb, depth, opac, w = nf.composite(sig, np.eye(3), [0.5, 1.5, 2.5], [1, 1, 1], np.zeros(3))
    a = 1 - np.exp(-sig)
    np.testing.assert_allclose(w, [a[0], (1 - a[0]) * a[1], (1 - a[0]) * (1 - a[1]) * a[2]])
    assert opac == pytest.approx(w.sum())


def test_rays_missing_grid_return_background():
    grid = constant_grid(1.0)
    rgb, depth, opac = nf.render_rays(grid, [[50.0, 50.0, 50.0]], [[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(rgb[0], grid.background)
    assert depth[0] == 0 and opac[0] == 0


def small_random_grid(seed=0):
    rng = np.random.default_rng(seed)
    spec = GridSpec((0.0, 0.0, 0.0), 1.0, (4, 4, 4))
    return nf.RadianceGrid(spec, rng.normal(0, 1.0, (4, 4, 4, 4)), t_near=0.0, t_far=4.0, step=0.3)


def rays(n, seed=1):
    rng = np.random.default_rng(seed)
    o = np.column_stack([np.full(n, 0.6), rng.uniform(0.8, 2.2, n), rng.uniform(0.8, 2.2, n)])
    d = np.column_stack([np.ones(n), rng.normal(0, 0.2, n), rng.normal(0, 0.2, n)])
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


def check_grid_gradient(loss_fn, grid, idx):
    """Central differences on a subset of raw entries."""
    _, grad = loss_fn(grid)
    num = np.zeros(len(idx))
    ana = np.zeros(len(idx))
    flat = grid.raw.reshape(-1)
    for j, i in enumerate(idx):
        v = np.array([flat[i]])

        def f():
            flat[i] = v[0]
            return loss_fn(grid)[0]
        num[j] = numeric_grad(f, v, 1e-6)[0]
        flat[i] = v[0]
        ana[j] = grad.reshape(-1)[i]
    return rel_error(ana, num)


def test_photometric_gradient():
    grid = small_random_grid()
    o, d = rays(6)
    target = np.random.default_rng(3).random((6, 3))
    idx = np.flatnonzero(np.abs(nf.photometric_loss(grid, o, d, target)[1].reshape(-1)) > 1e-4)[:40]
    assert len(idx) > 10
    assert check_grid_gradient(lambda g: nf.photometric_loss(g, o, d, target), grid, idx) < 1e-5


def test_depth_gradient_ignores_nonfinite_targets():
    grid = small_random_grid(2)
    o, d = rays(6, 4)
    target = np.array([1.0, 2.0, np.inf, 1.5, np.nan, 0.5])
    idx = np.flatnonzero(np.abs(nf.depth_loss(grid, o, d, target)[1].reshape(-1)) > 1e-4)[:40]
    assert check_grid_gradient(lambda g: nf.depth_loss(g, o, d, target), grid, idx) < 1e-5
    loss_all, _ = nf.depth_loss(grid, o, d, target)
    keep = np.isfinite(target)
    loss_sub, _ = nf.depth_loss(grid, o[keep], d[keep], target[keep])
    assert loss_all == pytest.approx(loss_sub, rel=1e-12)


def test_tv_gradient_and_sign():
    grid = small_random_grid(5)
    idx = np.arange(0, grid.raw.size, 4)[:48]       # density channel entries
    assert check_grid_gradient(nf.tv_loss, grid, idx) < 1e-5
    # a peaked column has lower (more negative) loss than a flat one with equal mass
    spec = GridSpec((0.0, 0.0, 0.0), 1.0, (1, 1, 4))
    flat = nf.RadianceGrid.empty(spec, 0.0)
    peaked = nf.RadianceGrid.empty(spec, -6.0)
    peaked.density[0, 0, 1] = 3.0
    assert nf.tv_loss(peaked)[0] < nf.tv_loss(flat)[0]
    assert nf.column_peakedness(peaked) > nf.column_peakedness(flat)


def test_render_depth_matches_full_renderer():
    grid = small_random_grid(6)
    o, d = rays(50, 7)
    _, depth, opac = nf.render_rays(grid, o, d)
    d2, op2 = nf.render_depth(grid, o, d)
    np.testing.assert_allclose(d2, depth, atol=1e-12)
    np.testing.assert_allclose(op2, opac, atol=1e-12)


def test_grid_file_roundtrip(tmp_path):
    grid = small_random_grid(8).rounded()
    nf.save_grid(tmp_path / "g.mvxg", grid)
    back = nf.load_grid(tmp_path / "g.mvxg")
    assert back.raw.tobytes() == grid.raw.tobytes()
    assert back.spec == grid.spec and back.step == grid.step
    (tmp_path / "bad.mvxg").write_bytes(b"XXXX" + b"\0" * 64)
    with pytest.raises(ValueError):
        nf.load_grid(tmp_path / "bad.mvxg")


def test_fit_recovers_a_wall_and_is_deterministic():
    # three views of a textured plane x = 6 inside a small volume
    spec = GridSpec((0.0, -4.0, -3.0), 0.5, (16, 16, 12))
    cams = [make_camera(16, 12, 60.0)]
    poses = [Pose.from_yaw(0.0, (1.0, y, 0.0)) for y in (-0.5, 0.0, 0.5)]
    images, depths = [], []
    for pose in poses:
        o, d = pixel_grid_rays(cams[0], pose)
        t = (6.0 - o[..., 0]) / d[..., 0]
        p = o + t[..., None] * d
        col = np.stack([0.5 + 0.3 * np.sin(p[..., 1] * 2), 0.5 + 0.3 * np.cos(p[..., 2] * 2),
                        np.full(t.shape, 0.4)], -1)
        images.append([col])
        depths.append([t])
    data = nf.RayDataset.from_frames(images, depths, poses, cams)
    cfg = nf.NerfConfig(iterations=150, batch_rays=256, lr=0.2, use_depth=True, t_far=12.0, seed=3)
    g1 = nf.fit_scene(data, spec, cfg)
    g2 = nf.fit_scene(data, spec, cfg)
    assert g1.raw.tobytes() == g2.raw.tobytes()
    _, dep, _ = nf.render_rays(g1, data.origins, data.dirs)
    assert np.median(np.abs(dep - data.depth)) < 0.5
