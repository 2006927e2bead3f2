"""Renderer tests: pinhole geometry, sampling, quadrature against closed forms
and an independent Riemann oracle, decomposition identities, depths, masks,
and the full gradient path through a 1-ray micro-scene."""

import numpy as np
import pytest
from scipy import stats

from nerfsep import autodiff as ad
from nerfsep.autodiff import Tensor, finite_difference_check
from nerfsep.fields import DeformSpec, FieldModel, MLPSpec, ModelConfig
from nerfsep.losses import (BetaPriorParams, LossWeights, beta_loss,
                            photometric_loss, sparsity_loss, total_loss, warp_loss)
from nerfsep.render import (CameraModel, QuadratureGrid, Rays, amodal_mask,
                            composite_quadrature, composite_render, expected_depth,
                            generate_rays, importance_samples, segmentation_mask,
                            single_quadrature, stratified_samples)


def riemann_composite(sf_fn, cf_fn, sb_fn, cb_fn, tn, tf, n=100_000):
    """Independent Riemann-sum oracle for the continuous composite integrals.

    Left-edge transmittance over n uniform steps; deliberately shares no code
    with the renderer's quadrature.
    """
    edges = np.linspace(tn, tf, n + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    dt = (tf - tn) / n
    sf, sb = sf_fn(mid), sb_fn(mid)
    upto = np.concatenate([[0.0], np.cumsum((sf + sb) * dt)])[:-1]
    trans = np.exp(-upto)
    color = (trans * (sf * cf_fn(mid) + sb * cb_fn(mid))).sum() * dt
    trans_f = np.exp(-np.concatenate([[0.0], np.cumsum(sf * dt)])[:-1])
    acc_f = (trans_f * sf).sum() * dt
    depth_num = (trans_f * sf * mid).sum() * dt
    depth = depth_num / acc_f if acc_f > 0 else tf
    return color, acc_f, depth


def _const_closure(sigma, color):
    def fn(pts, dirs):
        b, k, _ = pts.shape
        return (Tensor(np.full((b, k), float(sigma))),
                Tensor(np.broadcast_to(np.asarray(color, dtype=float), (b, k, 3)).copy()))
    return fn


def _ray(tn=1.0, tf=3.0):
    return Rays(np.zeros((1, 3)), [[0.0, 0.0, 1.0]], [tn], [tf])


# -- cameras / rays ------------------------------------------------------------

def _camera(width=8, height=8, focal=10.0):
    return CameraModel(fx=focal, fy=focal, cx=width / 2, cy=height / 2,
                       width=width, height=height,
                       rotation=np.eye(3), translation=np.zeros(3))


def test_principal_point_ray_is_camera_forward():
    cam = _camera()
    rays = generate_rays(cam, np.array([[4.0, 4.0]]), (0.1, 5.0))
    np.testing.assert_allclose(rays.dirs[0], cam.forward, atol=1e-15)


def test_pixel_offset_focal_gives_diagonal_ray():
    cam = _camera(focal=10.0)
    rays = generate_rays(cam, np.array([[4.0 + 10.0, 4.0]]), (0.1, 5.0))
    np.testing.assert_allclose(rays.dirs[0], np.array([1.0, 0.0, 1.0]) / np.sqrt(2),
                               rtol=1e-12)


def test_full_image_ray_count_and_norms():
    cam = _camera(width=6, height=4)
    rays = generate_rays(cam, cam.pixel_centers(), (0.1, 5.0))
    assert len(rays) == 24
    np.testing.assert_allclose(np.linalg.norm(rays.dirs, axis=1), 1.0, atol=1e-12)


def test_degenerate_intrinsics_rejected():
    cam = _camera()
    cam.fx = 0.0
    with pytest.raises(ValueError):
        generate_rays(cam, np.array([[1.0, 1.0]]), (0.1, 5.0))


def test_non_orthonormal_rotation_rejected():
    cam = _camera()
    cam.rotation = np.eye(3) * 2.0
    with pytest.raises(ValueError):
        cam.validate()


# -- stratified sampling ---------------------------------------------------------

def test_midpoint_mode_k4_unit_interval():
    rays = Rays(np.zeros((1, 3)), [[0, 0, 1.0]], [0.0], [1.0])
    grid = stratified_samples(rays, 4)
    np.testing.assert_allclose(grid.t[0], [0.125, 0.375, 0.625, 0.875], rtol=1e-15)


def test_stratified_draws_stay_in_their_bins():
    rays = Rays(np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)), [1.0] * 3, [5.0] * 3)
    rng = np.random.default_rng(0)
    for _ in range(10):
        grid = stratified_samples(rays, 16, rng)
        edges = np.linspace(1.0, 5.0, 17)
        assert np.all(grid.t >= edges[:-1]) and np.all(grid.t < edges[1:])


def test_midpoint_spacings_k64():
    rays = Rays(np.zeros((1, 3)), [[0, 0, 1.0]], [2.0], [6.0])
    grid = stratified_samples(rays, 64)
    np.testing.assert_allclose(grid.delta[0, :-1], 0.0625, rtol=1e-12)
    assert grid.delta[0, -1] == pytest.approx(0.03125)  # t_far - t_K


# -- importance sampling ----------------------------------------------------------

def test_importance_concentrated_weights_land_in_that_bin():
    rays = _ray(0.0, 1.0)
    grid = stratified_samples(rays, 8)
    w = np.zeros((1, 8))
    w[0, 3] = 5.0
    rng = np.random.default_rng(1)
    merged = importance_samples(grid, w, 16, rng)
    new = np.setdiff1d(merged.t[0], grid.t[0])
    lo, hi = grid.t[0, 3], grid.t[0, 3] + grid.delta[0, 3]
    assert len(new) == 16
    assert np.all((new >= lo) & (new < hi))


def test_importance_uniform_weights_ks_statistic():
    b, k, draws = 1, 16, 10_000
    tn, tf = 2.0, 6.0
    # edge-aligned grid so the bins tile [tn, tf)
    t = np.linspace(tn, tf, k, endpoint=False)[None, :]
    grid = QuadratureGrid(t.copy(), np.full((1, k), (tf - tn) / k), np.array([tf]))
    rng = np.random.default_rng(2)
    samples = []
    per_call = 64
    for _ in range(draws // per_call):
        merged = importance_samples(grid, np.ones((b, k)), per_call, rng)
        samples.append(np.setdiff1d(merged.t[0], grid.t[0]))
    flat = np.concatenate(samples)
    stat, _ = stats.kstest(flat, stats.uniform(loc=tn, scale=tf - tn).cdf)
    assert stat < 0.02


def test_importance_all_zero_weights_fall_back_to_uniform():
    rays = _ray(1.0, 3.0)
    grid = stratified_samples(rays, 8)
    merged = importance_samples(grid, np.zeros((1, 8)), 32, np.random.default_rng(3))
    new = np.setdiff1d(merged.t[0], grid.t[0])
    assert len(new) == 32
    assert np.all((new >= grid.t[0, 0]) & (new <= 3.0))


def test_merged_grid_strictly_sorted_and_bounded():
    rays = _ray(1.0, 3.0)
    grid = stratified_samples(rays, 32)
    rng = np.random.default_rng(4)
    w = rng.random((1, 32))
    merged = importance_samples(grid, w, 32, rng)
    assert merged.t.shape == (1, 64)
    assert np.all(np.diff(merged.t[0]) > 0)
    assert np.all(merged.delta > 0)


def test_importance_deterministic_mode_reproducible():
    rays = _ray(1.0, 3.0)
    grid = stratified_samples(rays, 8)
    w = np.linspace(1, 2, 8)[None, :]
    m1 = importance_samples(grid, w, 8, None)
    m2 = importance_samples(grid, w, 8, None)
    np.testing.assert_array_equal(m1.t, m2.t)


# -- quadrature vs closed form / oracle --------------------------------------------

S_CONST = 2.0
C_CONST = 0.8
TN, TF = 1.0, 3.0
EXACT_A = 1.0 - np.exp(-S_CONST * (TF - TN))          # 0.98168436...
EXACT_C = C_CONST * EXACT_A


def _const_render(k):
    rays = _ray(TN, TF)
    grid = stratified_samples(rays, k)
    res = composite_render(_const_closure(S_CONST, [C_CONST] * 3),
                           _const_closure(0.0, [0.0] * 3), rays, grid)
    return res


def test_constant_density_matches_closed_form_k256():
    res = _const_render(256)
    assert abs(res.rgb.numpy()[0, 0] - EXACT_C) < 1e-3
    assert abs(res.alpha_fg.numpy()[0] - EXACT_A) < 1e-3


def test_constant_density_riemann_oracle_agreement():
    oc, oa, _ = riemann_composite(lambda t: np.full_like(t, S_CONST), lambda t: C_CONST,
                                  lambda t: np.zeros_like(t), lambda t: 0.0, TN, TF)
    res = _const_render(256)
    assert abs(res.rgb.numpy()[0, 0] - oc) < 1e-3
    assert abs(res.alpha_fg.numpy()[0] - oa) < 1e-3


def test_quadrature_error_strictly_decreases_with_k():
    errs = []
    for k in (32, 256, 4096):
        res = _const_render(k)
        errs.append(abs(res.alpha_fg.numpy()[0] - EXACT_A))
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] < 1e-3 and errs[2] < 1e-5


def test_two_field_constant_case_converges():
    sf, sb = 0.7, 0.5
    cf, cb = 0.8, 0.3
    oc, oa, _ = riemann_composite(lambda t: np.full_like(t, sf), lambda t: cf,
                                  lambda t: np.full_like(t, sb), lambda t: cb,
                                  TN, TF, n=400_000)
    errs = []
    for k in (32, 256, 4096):
        rays = _ray(TN, TF)
        grid = stratified_samples(rays, k)
        res = composite_render(_const_closure(sf, [cf] * 3), _const_closure(sb, [cb] * 3),
                               rays, grid)
        errs.append(abs(res.rgb.numpy()[0, 0] - oc))
        if k == 256:
            assert abs(res.alpha_fg.numpy()[0] - oa) < 1e-3
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] < 1e-3


def test_empty_volume_renders_black_and_transparent():
    rays = _ray()
    grid = stratified_samples(rays, 16)
    res = composite_render(_const_closure(0.0, [0.5] * 3), _const_closure(0.0, [0.5] * 3),
                           rays, grid)
    assert np.array_equal(res.rgb.numpy(), np.zeros((1, 3)))
    assert np.array_equal(res.alpha_fg.numpy(), np.zeros(1))
    assert np.array_equal(res.alpha_total.numpy(), np.zeros(1))


def test_zero_foreground_reduces_to_background_single_render_bitwise():
    rng = np.random.default_rng(5)
    b, k = 4, 32
    rays = Rays(np.zeros((b, 3)), np.tile([0, 0, 1.0], (b, 1)), np.ones(b), np.ones(b) * 4)
    grid = stratified_samples(rays, k, rng)
    sig_b = Tensor(rng.random((b, k)) * 2)
    rgb_b = Tensor(rng.random((b, k, 3)))
    comp = composite_quadrature(Tensor(np.zeros((b, k))), Tensor(rng.random((b, k, 3))),
                                sig_b, rgb_b, grid)
    single = single_quadrature(sig_b, rgb_b, grid)
    assert np.array_equal(comp.rgb.numpy(), single.rgb.numpy())
    assert np.array_equal(comp.alpha_total.numpy(), single.alpha.numpy())
    assert np.array_equal(comp.alpha_fg.numpy(), np.zeros(b))


def test_zero_background_mirror_identity():
    rng = np.random.default_rng(6)
    b, k = 3, 24
    rays = Rays(np.zeros((b, 3)), np.tile([0, 0, 1.0], (b, 1)), np.ones(b), np.ones(b) * 4)
    grid = stratified_samples(rays, k, rng)
    sig_f = Tensor(rng.random((b, k)))
    rgb_f = Tensor(rng.random((b, k, 3)))
    comp = composite_quadrature(sig_f, rgb_f, Tensor(np.zeros((b, k))),
                                Tensor(rng.random((b, k, 3))), grid)
    single = single_quadrature(sig_f, rgb_f, grid)
    assert np.array_equal(comp.rgb.numpy(), single.rgb.numpy())
    # acc formulas differ only in float association (weight sum vs 1 - exp(-total))
    np.testing.assert_allclose(comp.alpha_fg.numpy(), single.alpha.numpy(), atol=1e-14)


def test_alpha_ordering_and_rgb_bounds():
    rng = np.random.default_rng(7)
    b, k = 8, 64
    rays = Rays(np.zeros((b, 3)), np.tile([0, 0, 1.0], (b, 1)), np.ones(b), np.ones(b) * 3)
    grid = stratified_samples(rays, k, rng)
    res = composite_quadrature(Tensor(rng.random((b, k)) * 1.5), Tensor(rng.random((b, k, 3))),
                               Tensor(rng.random((b, k)) * 1.5), Tensor(rng.random((b, k, 3))),
                               grid)
    a_fg, a_tot = res.alpha_fg.numpy(), res.alpha_total.numpy()
    assert np.all(a_fg >= 0) and np.all(a_tot <= 1.0)
    assert np.all(a_fg <= a_tot + 1e-12)
    # discrete composite color can exceed alpha_total by O(tau_f*tau_b); bound it
    assert np.all(res.rgb.numpy() >= 0)
    assert np.all(res.rgb.numpy() <= a_tot[:, None] + 1e-3)


def test_batch_permutation_invariance():
    rng = np.random.default_rng(8)
    b, k = 6, 16
    origins = rng.normal(0, 1, (b, 3))
    dirs = rng.normal(0, 1, (b, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    perm = rng.permutation(b)

    def render(order):
        rays = Rays(origins[order], dirs[order], np.ones(b), np.full(b, 4.0))
        grid = stratified_samples(rays, k)

        def field(pts, d):
            s = np.linalg.norm(pts, axis=-1)
            return Tensor(s), Tensor(np.clip(pts * 0.2 + 0.5, 0, 1))

        return composite_render(field, field, rays, grid)

    direct = render(np.arange(b))
    permuted = render(perm)
    np.testing.assert_array_equal(direct.rgb.numpy()[perm], permuted.rgb.numpy())


def test_negative_density_is_contract_violation():
    rays = _ray()
    grid = stratified_samples(rays, 4)
    with pytest.raises(ValueError, match="foreground"):
        composite_render(_const_closure(-1.0, [0.0] * 3), _const_closure(0.0, [0.0] * 3),
                         rays, grid)


# -- expected depth ----------------------------------------------------------------

def test_depth_of_single_opaque_sample():
    rays = _ray(1.0, 3.0)
    grid = stratified_samples(rays, 64)
    sig = np.zeros((1, 64))
    sig[0, np.argmin(np.abs(grid.t[0] - 2.0))] = 1e6
    depth, mass = expected_depth(sig, grid)
    assert depth[0] == pytest.approx(2.0, abs=grid.delta[0, 0])
    assert mass[0] == pytest.approx(1.0)


def test_depth_all_zero_density_returns_far():
    rays = _ray(1.0, 3.0)
    grid = stratified_samples(rays, 16)
    depth, mass = expected_depth(np.zeros((1, 16)), grid)
    assert mass[0] == 0.0
    assert depth[0] == 3.0


def test_depth_constant_density_matches_riemann_oracle():
    _, _, od = riemann_composite(lambda t: np.full_like(t, S_CONST), lambda t: 0.0,
                                 lambda t: np.zeros_like(t), lambda t: 0.0, TN, TF)
    rays = _ray(TN, TF)
    grid = stratified_samples(rays, 256)
    depth, _ = expected_depth(np.full((1, 256), S_CONST), grid)
    assert depth[0] == pytest.approx(od, abs=1e-3)


# -- masks --------------------------------------------------------------------------

def _occlusion_scene(k=128):
    """bg: opaque wall at t=1 on ray 0; fg: opaque blob at t=2 on rays 0 and 1."""
    rays = Rays(np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)), np.full(3, 0.5),
                np.full(3, 4.0))
    grid = stratified_samples(rays, k)

    def fg(pts, dirs):
        z = pts[:, :, 2]
        ray_is_fg = np.array([True, True, False])[:, None]
        sig = np.where(ray_is_fg & (np.abs(z - 2.0) < 0.2), 50.0, 0.0)
        return Tensor(sig), Tensor(np.full((*z.shape, 3), 0.8))

    def bg(pts, dirs):
        z = pts[:, :, 2]
        ray_has_wall = np.array([True, False, False])[:, None]
        sig = np.where(ray_has_wall & (np.abs(z - 1.0) < 0.2), 50.0, 0.0)
        return Tensor(sig), Tensor(np.full((*z.shape, 3), 0.2))

    return composite_render(fg, bg, rays, grid)


def test_segmentation_and_amodal_masks_on_occlusion_scene():
    res = _occlusion_scene()
    seg = segmentation_mask(res, tau_mass=0.1)
    amo = amodal_mask(res.alpha_fg.numpy(), threshold=0.5)
    # ray 0: fg occluded by wall -> depth-mode false, amodal true
    # ray 1: fg visible -> both true;  ray 2: empty -> both false
    np.testing.assert_array_equal(seg, [False, True, False])
    np.testing.assert_array_equal(amo, [True, True, False])
    assert np.all(seg <= amo)  # containment


def test_empty_foreground_masks_false():
    rays = _ray()
    grid = stratified_samples(rays, 16)
    res = composite_render(_const_closure(0.0, [0.0] * 3), _const_closure(1.0, [0.5] * 3),
                           rays, grid)
    assert not segmentation_mask(res, 0.1)[0]
    assert not amodal_mask(res.alpha_fg.numpy(), 0.5)[0]


def test_amodal_threshold_boundary_inclusive():
    assert amodal_mask(np.array([0.5]), 0.5)[0]
    assert not amodal_mask(np.array([0.0]), 0.5)[0]


def test_opaque_fg_in_front_of_bg_is_segmented():
    rays = _ray(0.5, 4.0)
    grid = stratified_samples(rays, 128)

    def fg(pts, dirs):
        z = pts[:, :, 2]
        return Tensor(np.where(np.abs(z - 1.0) < 0.2, 50.0, 0.0)), \
            Tensor(np.full((*z.shape, 3), 0.9))

    def bg(pts, dirs):
        z = pts[:, :, 2]
        return Tensor(np.where(np.abs(z - 3.0) < 0.2, 50.0, 0.0)), \
            Tensor(np.full((*z.shape, 3), 0.1))

    res = composite_render(fg, bg, rays, grid)
    assert segmentation_mask(res, 0.1)[0]


# -- full gradient path through a micro render --------------------------------------

def test_gradient_path_through_one_ray_render():
    """d(losses)/d(every weight + all three code types) on a K=8 micro-scene."""
    cfg = ModelConfig(
        n_instances=2, latent_dim=4,
        mlp=MLPSpec(trunk_depth=1, trunk_width=8, branch_depth=2, branch_width=8,
                    skip_at=1, n_freq_spatial=2, n_freq_dir=1),
        deform=DeformSpec(depth=1, width=8, skip_at=1, n_freq_spatial=2),
    )
    model = FieldModel(cfg, seed=5)
    # a non-trivial warp so deformation weights matter
    model.store["deformation/head/W"].data[:] = \
        np.random.default_rng(6).normal(0, 0.1, model.store["deformation/head/W"].shape)
    rays = _ray(1.0, 2.0)
    grid = stratified_samples(rays, 8)
    idx = np.array([1])
    target = np.array([[0.3, 0.6, 0.2]])

    def f():
        pts = grid.points(rays).reshape(-1, 3)
        sf, cf, res = model.foreground("coarse", pts, rays.dirs, idx, 8)
        sb, cb = model.background_field("coarse", pts, rays.dirs, idx, 8)
        out = composite_quadrature(sf.reshape(1, 8), cf.reshape(1, 8, 3),
                                   sb.reshape(1, 8), cb.reshape(1, 8, 3), grid)
        parts = {
            "fg": photometric_loss(out.rgb, target),
            "bg": photometric_loss(out.rgb, target * 0.5),
            "sparse": sparsity_loss(out.alpha_fg),
            "beta": beta_loss(out.alpha_fg, BetaPriorParams(), 1.0),
            "warp": warp_loss(res),
        }
        return total_loss(parts, LossWeights())

    params = {n: model.store[n] for n in model.store.names()}
    assert finite_difference_check(f, params, h=1e-5) < 1e-3
