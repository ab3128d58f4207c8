"""Model and camera foundations."""
import numpy as np
import pytest

from disksplat.camera import Camera, look_at
from disksplat.errors import SceneFormatError
from disksplat.model import (IDENTITY_DIM, SH_C0, SplatModel, activated,
                             eval_color, frames_from_normals, inverse_sigmoid,
                             local_to_world, model_from_points,
                             normalize_quaternions, quat_to_rotation,
                             random_model, rgb_to_dc, rotation_to_quat,
                             sh_basis, sh_basis_grad, sigmoid)


def test_sigmoid_inverse_roundtrip():
    p = np.array([1e-6, 0.25, 0.5, 0.9, 1 - 1e-6])
    np.testing.assert_allclose(sigmoid(inverse_sigmoid(p)), p, atol=1e-12)


def test_quat_rotation_orthonormal():
    rng = np.random.default_rng(0)
    q = normalize_quaternions(rng.normal(size=(40, 4)))
    R = quat_to_rotation(q)
    eye = np.einsum("nij,nkj->nik", R, R)
    np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), (40, 3, 3)),
                               atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_quat_rotation_roundtrip():
    rng = np.random.default_rng(1)
    q = normalize_quaternions(rng.normal(size=(25, 4)))
    q2 = rotation_to_quat(quat_to_rotation(q))
    # q and -q encode the same rotation
    sign = np.sign(np.einsum("ij,ij->i", q, q2))[:, None]
    np.testing.assert_allclose(q2 * sign, q, atol=1e-9)


def test_frames_from_normals_orthogonal():
    rng = np.random.default_rng(2)
    n = rng.normal(size=(30, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    R = quat_to_rotation(frames_from_normals(n, rng))
    tu, tv, nn = R[:, :, 0], R[:, :, 1], R[:, :, 2]
    np.testing.assert_allclose(np.einsum("ij,ij->i", tu, tv), 0, atol=1e-12)
    np.testing.assert_allclose(np.einsum("ij,ij->i", tu, nn), 0, atol=1e-12)
    np.testing.assert_allclose(nn, n, atol=1e-12)


def test_sh_basis_degree0_constant():
    dirs = np.random.default_rng(3).normal(size=(10, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    b = sh_basis(dirs, 0)
    np.testing.assert_allclose(b, SH_C0, atol=1e-15)


def test_sh_basis_orthogonality():
    # Monte Carlo inner products over the sphere approximate identity
    rng = np.random.default_rng(4)
    dirs = rng.normal(size=(200_000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    b = sh_basis(dirs, 3)
    gram = 4 * np.pi * b.T @ b / len(dirs)
    np.testing.assert_allclose(gram, np.eye(16), atol=0.05)


def test_sh_basis_grad_matches_fd():
    rng = np.random.default_rng(5)
    dirs = rng.normal(size=(6, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    grad = sh_basis_grad(dirs, 3)
    eps = 1e-6
    for axis in range(3):
        dp = dirs.copy()
        dp[:, axis] += eps
        dm = dirs.copy()
        dm[:, axis] -= eps
        fd = (sh_basis(dp, 3) - sh_basis(dm, 3)) / (2 * eps)
        np.testing.assert_allclose(grad[:, :, axis], fd, atol=1e-6)


def test_rgb_to_dc_roundtrip():
    rgb = np.array([[0.1, 0.5, 0.9]])
    dc = rgb_to_dc(rgb)
    np.testing.assert_allclose(dc * SH_C0 + 0.5, rgb, atol=1e-12)


class TestSplatModel:
    def make(self, n=12, seed=0):
        return random_model(n, np.random.default_rng(seed), sh_degree=1)

    def test_validate_passes_on_random(self):
        self.make().validate()

    def test_validate_rejects_bad_quat_norm(self):
        m = self.make()
        m.quats[0] = (10.0, 0, 0, 0)
        with pytest.raises(ValueError):
            m.validate()

    def test_validate_rejects_nan(self):
        m = self.make()
        m.centers[2, 1] = np.nan
        with pytest.raises(ValueError):
            m.validate()

    def test_select_and_concatenate(self):
        m = self.make(10)
        a = m.select(np.array([0, 2, 4]))
        b = m.select(np.array([1, 3]))
        assert len(a) == 3 and len(b) == 2
        c = SplatModel.concatenate(a, b)
        assert len(c) == 5
        np.testing.assert_array_equal(c.centers[:3], m.centers[[0, 2, 4]])
        np.testing.assert_array_equal(c.centers[3:], m.centers[[1, 3]])

    def test_select_boolean_mask(self):
        m = self.make(8)
        mask = np.zeros(8, dtype=bool)
        mask[[1, 5]] = True
        np.testing.assert_array_equal(m.select(mask).centers,
                                      m.centers[[1, 5]])

    def test_copy_is_independent(self):
        m = self.make()
        c = m.copy()
        c.centers[0, 0] += 1.0
        assert m.centers[0, 0] != c.centers[0, 0]

    def test_bounds_contain_centers(self):
        m = self.make(30)
        lo, hi = m.bounds()
        assert np.all(m.centers >= lo - 1e-12)
        assert np.all(m.centers <= hi + 1e-12)

    def test_astype_roundtrip(self):
        m = self.make()
        m32 = m.astype(np.float32)
        assert m32.dtype == np.float32
        assert m32.astype(np.float64).dtype == np.float64

    def test_empty(self):
        e = SplatModel.empty(sh_degree=2)
        assert len(e) == 0
        e.validate()

    def test_scales_and_opacities_are_activated(self):
        m = self.make()
        np.testing.assert_allclose(m.scales, np.exp(m.log_scales))
        np.testing.assert_allclose(m.opacities, sigmoid(m.opacity_logits))


def test_model_from_points_keeps_colors():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, size=(50, 3))
    cols = rng.uniform(0.1, 0.9, size=(50, 3))
    m = model_from_points(pts, rng, colors=cols, sh_degree=0)
    np.testing.assert_allclose(m.centers, pts, atol=1e-6)
    view = np.array([[0.0, 0.0, 1.0]])
    for i in (0, 17, 49):
        got, _raw = eval_color(m, view, index=i)
        np.testing.assert_allclose(got.ravel(), cols[i], atol=1e-6)


def test_local_to_world_center_at_origin():
    m = random_model(3, np.random.default_rng(7))
    p = local_to_world(m, 0.0, 0.0, index=1)
    np.testing.assert_allclose(p, m.centers[1], atol=1e-12)


def test_local_to_world_unit_steps():
    m = random_model(3, np.random.default_rng(8))
    p0 = local_to_world(m, 0.0, 0.0, index=0)
    pu = local_to_world(m, 1.0, 0.0, index=0)
    s_u = activated(m, 0)[0][0]
    np.testing.assert_allclose(np.linalg.norm(pu - p0), s_u, atol=1e-12)


class TestCamera:
    def test_look_at_eye_recovered(self):
        cam = look_at([1.0, 2.0, 3.0], [0, 0, 0], fov_deg=60)
        np.testing.assert_allclose(cam.center, [1, 2, 3], atol=1e-12)

    def test_look_at_target_projects_to_image_center(self):
        cam = look_at([2.0, -1.0, 0.5], [0.2, 0.1, -0.3],
                      width=64, height=48, fov_deg=55)
        px, z = cam.project(np.array([[0.2, 0.1, -0.3]]))
        assert z[0] > 0
        np.testing.assert_allclose(px[0], [cam.cx, cam.cy], atol=1e-9)

    def test_focal_matches_fov(self):
        cam = look_at([0, 0, -3], [0, 0, 0], width=100, height=100,
                      fov_deg=90)
        np.testing.assert_allclose(cam.fx, 50.0, atol=1e-9)

    def test_point_behind_camera_negative_depth(self):
        cam = look_at([0, 0, -3], [0, 0, 0], fov_deg=55)
        _, z = cam.project(np.array([[0.0, 0.0, -5.0]]))
        assert z[0] < 0

    def test_dict_roundtrip(self):
        cam = look_at([1, 0, 1], [0, 0, 0], width=32, height=24, fov_deg=40)
        cam2 = Camera.from_dict(cam.to_dict())
        np.testing.assert_allclose(cam2.world_to_camera, cam.world_to_camera)
        assert (cam2.width, cam2.height) == (32, 24)
        np.testing.assert_allclose((cam2.fx, cam2.fy, cam2.cx, cam2.cy),
                                   (cam.fx, cam.fy, cam.cx, cam.cy))

    def test_from_dict_rejects_missing_key(self):
        cam = look_at([1, 0, 1], [0, 0, 0], fov_deg=40)
        d = cam.to_dict()
        del d["fx"]
        with pytest.raises(SceneFormatError):
            Camera.from_dict(d)

    def test_ray_directions_through_center_pixel(self):
        cam = look_at([0, 0, -2], [0, 0, 1], width=9, height=9, fov_deg=50)
        dirs = cam.ray_directions()
        # center pixel of an odd image is the principal ray
        mid = dirs[4, 4]
        fwd = cam.world_to_camera[2, :3]
        np.testing.assert_allclose(mid / np.linalg.norm(mid), fwd, atol=1e-9)

    def test_degenerate_look_at_rejected(self):
        with pytest.raises((ValueError, SceneFormatError)):
            look_at([0, 0, 1], [0, 0, 1], fov_deg=55)
