"""Rasterizer invariants: compositing algebra, filtering, depth semantics."""
import numpy as np
import pytest

from disksplat.camera import Camera, look_at
from disksplat.model import (IDENTITY_DIM, SplatModel, inverse_sigmoid,
                             random_model, rgb_to_dc)
from disksplat.render import (RenderOptions, filtered_weight, render,
                              render_depth, ray_splat_intersect)


def front_model(n, seed, sh_degree=1):
    """Random splats pushed in front of a canonical camera."""
    m = random_model(n, np.random.default_rng(seed), sh_degree=sh_degree)
    m.centers[:, 2] += 4.0
    return m


def canonical_cam(size=16):
    return look_at([0, 0, 0], [0, 0, 4], up=(0, 1, 0),
                   width=size, height=size, fov_deg=55)


def axis_cam(width=16, height=16, fx=20.0):
    """Identity-pose camera with the principal point on a pixel center."""
    cx = width // 2 + 0.5
    cy = height // 2 + 0.5
    return Camera(width, height, fx, fx, cx, cy, np.eye(4))


def disk_at(center, scale, color, opacity, sh_degree=0):
    m = SplatModel.empty(sh_degree=sh_degree)
    k = (sh_degree + 1) ** 2
    sh = np.zeros((1, k, 3))
    sh[0, 0] = rgb_to_dc(np.asarray(color, dtype=np.float64)[None])[0]
    return SplatModel(
        centers=np.array([center], dtype=np.float64),
        quats=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.log(np.array([[scale, scale]], dtype=np.float64)),
        opacity_logits=np.array([inverse_sigmoid(opacity)], dtype=np.float64),
        sh=sh,
        identities=np.zeros((1, IDENTITY_DIM)),
        sh_degree=sh_degree)


def stack(*models):
    out = models[0]
    for m in models[1:]:
        out = SplatModel.concatenate(out, m)
    return out


class TestCompositingAlgebra:
    def test_weights_telescope_to_one_minus_transmittance(self):
        for seed in range(6):
            m = front_model(12, seed)
            cam = canonical_cam()
            out = render(m, cam, want_cache=True)
            c = out.cache
            sum_w = np.bincount(c.px, weights=c.weights,
                                minlength=cam.width * cam.height)
            total = sum_w + c.t_fin
            assert total.max() <= 1.0 + 1e-5
            # early-out can only lose weight, never create it
            assert total.min() >= 0.0
            covered = c.alpha_flat > 0
            np.testing.assert_allclose(sum_w[covered],
                                       c.alpha_flat[covered], atol=1e-9)

    def test_two_splat_closed_form(self):
        cam = axis_cam()
        near = disk_at([0, 0, 2.0], 2.0, (1.0, 0.0, 0.0), 0.5)
        far = disk_at([0, 0, 3.0], 2.0, (0.0, 1.0, 0.0), 0.5)
        out = render(stack(near, far), cam,
                     options=RenderOptions(background=(0.0, 0.0, 0.0)))
        r, c = cam.height // 2, cam.width // 2
        # kernel is exactly 1 at both projected centers
        np.testing.assert_allclose(out.color[r, c, 0], 0.5, atol=1e-12)
        np.testing.assert_allclose(out.color[r, c, 1], 0.25, atol=1e-12)
        np.testing.assert_allclose(out.alpha[r, c], 0.75, atol=1e-12)

    def test_order_is_by_depth_not_input(self):
        cam = axis_cam()
        near = disk_at([0, 0, 2.0], 2.0, (1.0, 0.0, 0.0), 0.5)
        far = disk_at([0, 0, 3.0], 2.0, (0.0, 1.0, 0.0), 0.5)
        a = render(stack(near, far), cam)
        b = render(stack(far, near), cam)
        np.testing.assert_allclose(a.color, b.color, atol=1e-12)

    def test_opaque_front_splat_hides_back(self):
        cam = axis_cam()
        near = disk_at([0, 0, 2.0], 2.0, (1.0, 0.0, 0.0), 0.999999)
        far = disk_at([0, 0, 3.0], 2.0, (0.0, 1.0, 0.0), 0.9)
        out = render(stack(near, far), cam)
        r, c = cam.height // 2, cam.width // 2
        assert out.color[r, c, 1] < 1e-5

    def test_background_fills_transmittance(self):
        cam = axis_cam()
        m = disk_at([0, 0, 2.0], 2.0, (1.0, 0.0, 0.0), 0.25)
        out = render(m, cam, options=RenderOptions(background=(0, 0, 1)))
        r, c = cam.height // 2, cam.width // 2
        np.testing.assert_allclose(out.color[r, c], [0.25, 0.0, 0.75],
                                   atol=1e-12)


class TestLowPassFilter:
    def test_filtered_weight_dominates_both_branches(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            g = rng.uniform(0, 1)
            x = rng.uniform(0, 16, size=2)
            c = rng.uniform(0, 16, size=2)
            sigma = rng.uniform(0.3, 2.0)
            w = filtered_weight(g, x, c, sigma)
            screen = np.exp(-0.5 * np.sum((x - c) ** 2) / sigma**2)
            assert w >= g - 1e-15
            assert w >= screen - 1e-15
            np.testing.assert_allclose(w, max(g, screen), atol=1e-15)

    def test_tiny_splat_still_covers_a_pixel(self):
        # object-space footprint far below a pixel; the screen branch
        # keeps it visible
        cam = axis_cam()
        m = disk_at([0, 0, 2.0], 1e-4, (1.0, 0.0, 0.0), 0.9)
        out = render(m, cam)
        r, c = cam.height // 2, cam.width // 2
        np.testing.assert_allclose(out.alpha[r, c], 0.9, atol=1e-9)


class TestDepth:
    def test_median_depth_single_opaque_surface(self):
        cam = axis_cam()
        m = disk_at([0, 0, 2.0], 2.0, (1, 1, 1), 0.999)
        out = render(m, cam)
        r, c = cam.height // 2, cam.width // 2
        np.testing.assert_allclose(out.depth[r, c], 2.0, atol=1e-9)

    def test_median_crossing_picks_second_surface(self):
        # first disk leaves T = 0.5 exactly, so the 0.5 crossing lands
        # on the second
        cam = axis_cam()
        a = disk_at([0, 0, 2.0], 2.0, (1, 0, 0), 0.5)
        b = disk_at([0, 0, 3.0], 2.0, (0, 1, 0), 0.9)
        out = render(stack(a, b), cam)
        r, c = cam.height // 2, cam.width // 2
        np.testing.assert_allclose(out.depth[r, c], 3.0, atol=1e-9)

    def test_uncovered_pixels_have_zero_depth(self):
        cam = axis_cam()
        m = disk_at([0, 0, 2.0], 0.05, (1, 0, 0), 0.9)
        out = render(m, cam)
        assert out.depth[0, 0] == 0.0

    def test_render_depth_matches_render(self):
        m = front_model(15, 3)
        cam = canonical_cam()
        d, a = render_depth(m, cam)
        out = render(m, cam)
        np.testing.assert_allclose(d, out.depth, atol=1e-12)
        np.testing.assert_allclose(a, out.alpha, atol=1e-12)

    def test_mean_depth_weighted_average(self):
        cam = axis_cam()
        a = disk_at([0, 0, 2.0], 2.0, (1, 0, 0), 0.5)
        b = disk_at([0, 0, 3.0], 2.0, (0, 1, 0), 0.5)
        out = render(stack(a, b), cam,
                     options=RenderOptions(depth_mode="mean"))
        r, c = cam.height // 2, cam.width // 2
        # weights 0.5 and 0.25, normalized by alpha 0.75
        want = (0.5 * 2.0 + 0.25 * 3.0) / 0.75
        np.testing.assert_allclose(out.depth[r, c], want, atol=1e-9)


class TestGeneralBehavior:
    def test_empty_model_renders_background(self):
        cam = canonical_cam()
        out = render(SplatModel.empty(sh_degree=1), cam,
                     options=RenderOptions(background=(0.2, 0.3, 0.4)))
        np.testing.assert_allclose(out.color[..., 0], 0.2)
        np.testing.assert_allclose(out.alpha, 0.0)
        np.testing.assert_allclose(out.depth, 0.0)

    def test_splat_behind_camera_invisible(self):
        cam = axis_cam()
        m = disk_at([0, 0, -2.0], 2.0, (1, 0, 0), 0.9)
        out = render(m, cam)
        np.testing.assert_allclose(out.alpha, 0.0)

    def test_alpha_within_bounds_random_scenes(self):
        for seed in range(8):
            out = render(front_model(25, seed), canonical_cam())
            assert out.alpha.min() >= 0.0
            assert out.alpha.max() <= 1.0
            assert np.all(np.isfinite(out.color))
            assert np.all(np.isfinite(out.identity))

    def test_identity_field_composites_like_color(self):
        cam = axis_cam()
        m = disk_at([0, 0, 2.0], 2.0, (1, 0, 0), 0.5)
        m.identities[0] = np.arange(1.0, 9.0)
        out = render(m, cam)
        r, c = cam.height // 2, cam.width // 2
        np.testing.assert_allclose(out.identity[r, c],
                                   0.5 * np.arange(1.0, 9.0), atol=1e-12)

    def test_custom_features_override_identities(self):
        cam = axis_cam()
        m = disk_at([0, 0, 2.0], 2.0, (1, 0, 0), 0.5)
        feats = np.array([[2.0, 4.0]])
        out = render(m, cam, features=feats)
        r, c = cam.height // 2, cam.width // 2
        np.testing.assert_allclose(out.identity[r, c], [1.0, 2.0], atol=1e-12)

    def test_ray_splat_intersect_center_hit(self):
        cam = axis_cam()
        m = disk_at([0, 0, 2.0], 0.7, (1, 0, 0), 0.9)
        hit = ray_splat_intersect(cam, (cam.width // 2, cam.height // 2), m)
        assert hit is not None
        u, v, depth = hit
        np.testing.assert_allclose((u, v), (0.0, 0.0), atol=1e-12)
        np.testing.assert_allclose(depth, 2.0, atol=1e-12)

    def test_ray_parallel_to_disk_misses(self):
        cam = axis_cam()
        m = disk_at([0, 0, 2.0], 0.7, (1, 0, 0), 0.9)
        # rotate the disk edge-on: normal perpendicular to the ray
        m.quats[0] = np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])
        hit = ray_splat_intersect(cam, (cam.width // 2, cam.height // 2), m)
        assert hit is None

    def test_count_tracks_contributors(self):
        cam = axis_cam()
        m = stack(disk_at([0, 0, 2.0], 2.0, (1, 0, 0), 0.5),
                  disk_at([0, 0, 3.0], 2.0, (0, 1, 0), 0.5))
        out = render(m, cam)
        r, c = cam.height // 2, cam.width // 2
        assert out.count[r, c] == 2


@pytest.mark.parametrize("sh_degree", [0, 1, 2, 3])
def test_render_supports_all_sh_degrees(sh_degree):
    m = front_model(8, 11, sh_degree=sh_degree)
    out = render(m, canonical_cam())
    assert np.all(np.isfinite(out.color))
