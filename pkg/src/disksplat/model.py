"""Oriented 2D Gaussian disk primitives and their local-plane math.

A splat is an elliptical disk living in a tangent plane: center ``p``,
an orthonormal frame (t_u, t_v, normal) stored as a unit quaternion,
per-axis scales stored in log space, a sigmoid-activated opacity, SH
color coefficients, and an 8-dim identity vector used for segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY_DIM = 8
NUM_CLASSES = 256

# Real spherical-harmonic constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p):
    p = np.asarray(p)
    return np.log(p / (1.0 - p))


def normalize_quaternions(quats):
    """Unit-normalize an (N, 4) array of (w, x, y, z) quaternions."""
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    return quats / norms


def quat_to_rotation(quats):
    """(N, 4) unit quaternions -> (N, 3, 3) rotation matrices.

    Columns are the splat frame: R[:, :, 0] = t_u, R[:, :, 1] = t_v,
    R[:, :, 2] = plane normal.
    """
    q = np.asarray(quats)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotation_jacobian(quats):
    """d R / d q for unit quaternions: (N, 4, 3, 3).

    Valid for q on the unit sphere; compose with the normalization
    Jacobian (I - q q^T)/|q| to differentiate through stored parameters.
    """
    q = np.asarray(quats)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zeros = np.zeros_like(w)
    J = np.empty(q.shape[:-1] + (4, 3, 3), dtype=q.dtype)
    # dR/dw
    J[..., 0, 0, 0] = zeros;   J[..., 0, 0, 1] = -2 * z; J[..., 0, 0, 2] = 2 * y
    J[..., 0, 1, 0] = 2 * z;   J[..., 0, 1, 1] = zeros;  J[..., 0, 1, 2] = -2 * x
    J[..., 0, 2, 0] = -2 * y;  J[..., 0, 2, 1] = 2 * x;  J[..., 0, 2, 2] = zeros
    # dR/dx
    J[..., 1, 0, 0] = zeros;   J[..., 1, 0, 1] = 2 * y;  J[..., 1, 0, 2] = 2 * z
    J[..., 1, 1, 0] = 2 * y;   J[..., 1, 1, 1] = -4 * x; J[..., 1, 1, 2] = -2 * w
    J[..., 1, 2, 0] = 2 * z;   J[..., 1, 2, 1] = 2 * w;  J[..., 1, 2, 2] = -4 * x
    # dR/dy
    J[..., 2, 0, 0] = -4 * y;  J[..., 2, 0, 1] = 2 * x;  J[..., 2, 0, 2] = 2 * w
    J[..., 2, 1, 0] = 2 * x;   J[..., 2, 1, 1] = zeros;  J[..., 2, 1, 2] = 2 * z
    J[..., 2, 2, 0] = -2 * w;  J[..., 2, 2, 1] = 2 * z;  J[..., 2, 2, 2] = -4 * y
    # dR/dz
    J[..., 3, 0, 0] = -4 * z;  J[..., 3, 0, 1] = -2 * w; J[..., 3, 0, 2] = 2 * x
    J[..., 3, 1, 0] = 2 * w;   J[..., 3, 1, 1] = -4 * z; J[..., 3, 1, 2] = 2 * y
    J[..., 3, 2, 0] = 2 * x;   J[..., 3, 2, 1] = 2 * y;  J[..., 3, 2, 2] = zeros
    return J


def rotation_to_quat(R):
    """(N, 3, 3) rotation matrices -> (N, 4) unit (w, x, y, z) quaternions."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    if single:
        R = R[None]
    n = R.shape[0]
    q = np.empty((n, 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    # Shepperd's method: pick the numerically largest pivot per matrix
    case0 = tr > 0
    s = np.sqrt(np.where(case0, tr + 1.0, 1.0)) * 2.0
    q[case0, 0] = 0.25 * s[case0]
    q[case0, 1] = (R[case0, 2, 1] - R[case0, 1, 2]) / s[case0]
    q[case0, 2] = (R[case0, 0, 2] - R[case0, 2, 0]) / s[case0]
    q[case0, 3] = (R[case0, 1, 0] - R[case0, 0, 1]) / s[case0]
    rest = ~case0
    for i in np.flatnonzero(rest):
        m = R[i]
        if m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s_i = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q[i] = [(m[2, 1] - m[1, 2]) / s_i, 0.25 * s_i,
                    (m[0, 1] + m[1, 0]) / s_i, (m[0, 2] + m[2, 0]) / s_i]
        elif m[1, 1] >= m[2, 2]:
            s_i = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q[i] = [(m[0, 2] - m[2, 0]) / s_i, (m[0, 1] + m[1, 0]) / s_i,
                    0.25 * s_i, (m[1, 2] + m[2, 1]) / s_i]
        else:
            s_i = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q[i] = [(m[1, 0] - m[0, 1]) / s_i, (m[0, 2] + m[2, 0]) / s_i,
                    (m[1, 2] + m[2, 1]) / s_i, 0.25 * s_i]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q[0] if single else q


def frames_from_normals(normals, rng=None):
    """Tangent frames (t_u, t_v, n) for unit normals, as quaternions.

    t_u is an arbitrary perpendicular (seeded when rng given, so frames
    vary); the frame is right-handed with the normal third.
    """
    n = np.asarray(normals, dtype=np.float64)
    count = n.shape[0]
    helper = np.tile(np.array([0.0, 0.0, 1.0]), (count, 1))
    flip = np.abs(n[:, 2]) > 0.9
    helper[flip] = [1.0, 0.0, 0.0]
    t_u = np.cross(helper, n)
    t_u /= np.linalg.norm(t_u, axis=1, keepdims=True)
    if rng is not None:
        # random in-plane spin
        ang = rng.uniform(0, 2 * np.pi, size=count)
        t_v0 = np.cross(n, t_u)
        t_u = np.cos(ang)[:, None] * t_u + np.sin(ang)[:, None] * t_v0
    t_v = np.cross(n, t_u)
    R = np.stack([t_u, t_v, n], axis=2)
    return rotation_to_quat(R)


def sh_basis(dirs, degree):
    """Real SH basis values at unit directions: (N, (degree+1)^2)."""
    d = np.asarray(dirs)
    n = d.shape[0]
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((n, (degree + 1) ** 2), dtype=d.dtype)
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs, degree):
    """d basis / d direction: (N, (degree+1)^2, 3)."""
    d = np.asarray(dirs)
    n = d.shape[0]
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    g = np.zeros((n, (degree + 1) ** 2, 3), dtype=d.dtype)
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = SH_C2[2] * (-2 * x)
        g[:, 6, 1] = SH_C2[2] * (-2 * y)
        g[:, 6, 2] = SH_C2[2] * (4 * z)
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * (2 * x)
        g[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = SH_C3[0] * (6 * x * y)
        g[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        g[:, 10, 0] = SH_C3[1] * (y * z)
        g[:, 10, 1] = SH_C3[1] * (x * z)
        g[:, 10, 2] = SH_C3[1] * (x * y)
        g[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = SH_C3[2] * (8 * y * z)
        g[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = SH_C3[4] * (8 * x * z)
        g[:, 14, 0] = SH_C3[5] * (2 * x * z)
        g[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        g[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return g


def rgb_to_dc(rgb):
    """Invert the degree-0 color convention: coefficients giving `rgb`."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


@dataclass
class SplatModel:
    """Struct-of-arrays container for a set of 2D Gaussian disks.

    centers        (N, 3) world positions
    quats          (N, 4) unit (w, x, y, z); columns of R(q) are t_u, t_v, n
    log_scales     (N, 2) log of (s_u, s_v)
    opacity_logits (N,)   sigmoid-activated to opacity
    sh             (N, K, 3) color coefficients, K = (sh_degree+1)^2
    identities     (N, 8)
    """

    centers: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    identities: np.ndarray
    sh_degree: int = 3

    FIELDS = ("centers", "quats", "log_scales", "opacity_logits", "sh",
              "identities")

    def __len__(self):
        return self.centers.shape[0]

    @property
    def dtype(self):
        return self.centers.dtype

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def bounds(self):
        """Axis-aligned bounds of the splat centers, (min, max)."""
        if len(self) == 0:
            z = np.zeros(3, dtype=self.dtype)
            return z, z
        return self.centers.min(axis=0), self.centers.max(axis=0)

    def copy(self):
        return SplatModel(*(getattr(self, f).copy() for f in self.FIELDS),
                          sh_degree=self.sh_degree)

    def select(self, index):
        """Sub-model at a boolean mask or index array; order preserved."""
        return SplatModel(*(getattr(self, f)[index] for f in self.FIELDS),
                          sh_degree=self.sh_degree)

    def astype(self, dtype):
        return SplatModel(*(getattr(self, f).astype(dtype) for f in self.FIELDS),
                          sh_degree=self.sh_degree)

    @staticmethod
    def concatenate(a, b):
        if a.sh_degree != b.sh_degree:
            raise ValueError("sh_degree mismatch")
        return SplatModel(
            *(np.concatenate([getattr(a, f), getattr(b, f)]) for f in SplatModel.FIELDS),
            sh_degree=a.sh_degree)

    @staticmethod
    def empty(sh_degree=3, dtype=np.float64):
        k = (sh_degree + 1) ** 2
        return SplatModel(
            centers=np.zeros((0, 3), dtype=dtype),
            quats=np.zeros((0, 4), dtype=dtype),
            log_scales=np.zeros((0, 2), dtype=dtype),
            opacity_logits=np.zeros((0,), dtype=dtype),
            sh=np.zeros((0, k, 3), dtype=dtype),
            identities=np.zeros((0, IDENTITY_DIM), dtype=dtype),
            sh_degree=sh_degree)

    def validate(self, atol=1e-6):
        """Raise ValueError naming the first violated invariant."""
        n = len(self)
        if self.quats.shape != (n, 4):
            raise ValueError("quats shape mismatch")
        if self.identities.shape != (n, IDENTITY_DIM):
            raise ValueError(f"identity vectors must have length {IDENTITY_DIM}")
        k = (self.sh_degree + 1) ** 2
        if self.sh.shape != (n, k, 3):
            raise ValueError(f"sh shape {self.sh.shape} != {(n, k, 3)}")
        for f in self.FIELDS:
            if not np.all(np.isfinite(getattr(self, f))):
                raise ValueError(f"non-finite values in {f}")
        if n:
            norms = np.linalg.norm(self.quats, axis=1)
            worst = np.abs(norms - 1.0).max()
            if worst > atol:
                raise ValueError(f"quaternion norm deviates by {worst:.2e}")

    def renormalize_quats(self):
        self.quats[:] = normalize_quaternions(self.quats)


def local_to_world(splat_or_model, u, v, index=0):
    """Point on a splat's plane at scale-normalized local coords (u, v).

    Equals p + s_u*t_u*u + s_v*t_v*v, i.e. the homogeneous transform
    [[RS, p], [0, 1]] applied to (u, v, 1, 1).
    """
    m = splat_or_model
    R = quat_to_rotation(normalize_quaternions(m.quats[index]))
    s = np.exp(m.log_scales[index])
    return (m.centers[index]
            + s[0] * R[:, 0] * u
            + s[1] * R[:, 1] * v)


def splat_transform(model, index=0):
    """The 4x4 homogeneous matrix mapping (u, v, 1, 1) to world space."""
    R = quat_to_rotation(normalize_quaternions(model.quats[index]))
    s = np.exp(model.log_scales[index])
    H = np.zeros((4, 4), dtype=model.dtype)
    H[:3, 0] = R[:, 0] * s[0]
    H[:3, 1] = R[:, 1] * s[1]
    H[:3, 3] = model.centers[index]
    H[3, 3] = 1.0
    return H


def eval_kernel(u, v):
    """Standard 2D Gaussian density exp(-(u^2 + v^2) / 2)."""
    u = np.asarray(u)
    v = np.asarray(v)
    return np.exp(-0.5 * (u * u + v * v))


def eval_color(model, view_dirs, index=None):
    """SH color for splats at unit view directions, clamped to [0, 1].

    view_dirs: (3,) shared direction or (N, 3) per splat.
    """
    sh = model.sh if index is None else model.sh[index]
    if sh.ndim == 2:
        sh = sh[None]
    dirs = np.atleast_2d(np.asarray(view_dirs, dtype=model.dtype))
    if dirs.shape[0] == 1 and sh.shape[0] > 1:
        dirs = np.broadcast_to(dirs, (sh.shape[0], 3))
    basis = sh_basis(dirs, model.sh_degree)
    raw = np.einsum("nk,nkc->nc", basis, sh) + 0.5
    out = np.clip(raw, 0.0, 1.0)
    return (out[0], raw[0]) if index is not None else (out, raw)


def activated(model, index=None):
    """(scales, opacity) after exp/sigmoid activations."""
    if index is None:
        return np.exp(model.log_scales), sigmoid(model.opacity_logits)
    return np.exp(model.log_scales[index]), sigmoid(model.opacity_logits[index])


def random_model(n, rng, *, sh_degree=3, center_low=-1.0, center_high=1.0,
                 scale_low=-2.3, scale_high=-0.7, opacity_low=-1.5,
                 opacity_high=2.0, identity_std=0.01, dtype=np.float64):
    """Random valid model; used by tests, demos, and point-free init."""
    k = (sh_degree + 1) ** 2
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rng.uniform(-0.8, 0.8, size=(n, 3))
    if k > 1:
        sh[:, 1:, :] = rng.normal(scale=0.05, size=(n, k - 1, 3))
    return SplatModel(
        centers=rng.uniform(center_low, center_high, size=(n, 3)).astype(dtype),
        quats=quats.astype(dtype),
        log_scales=rng.uniform(scale_low, scale_high, size=(n, 2)).astype(dtype),
        opacity_logits=rng.uniform(opacity_low, opacity_high, size=n).astype(dtype),
        sh=sh.astype(dtype),
        identities=(identity_std * rng.normal(size=(n, IDENTITY_DIM))).astype(dtype),
        sh_degree=sh_degree)


def model_from_points(points, rng, *, colors=None, sh_degree=3,
                      scale=None, opacity=0.1, identity_std=0.01,
                      dtype=np.float32):
    """Initialize splats from a sparse surface point cloud.

    Scales default to the mean nearest-neighbor spacing; orientations
    are random (photometric training sorts them out).
    """
    from scipy.spatial import cKDTree

    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if scale is None:
        if n > 1:
            d, _ = cKDTree(pts).query(pts, k=2)
            scale = float(np.mean(d[:, 1])) * 1.5
        else:
            scale = 0.1
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    if colors is None:
        sh[:, 0, :] = rng.uniform(-0.5, 0.5, size=(n, 3))
    else:
        sh[:, 0, :] = rgb_to_dc(colors)
    return SplatModel(
        centers=pts.astype(dtype),
        quats=quats.astype(dtype),
        log_scales=np.full((n, 2), np.log(scale), dtype=dtype),
        opacity_logits=np.full(n, float(inverse_sigmoid(opacity)), dtype=dtype),
        sh=sh.astype(dtype),
        identities=(identity_std * rng.normal(size=(n, IDENTITY_DIM))).astype(dtype),
        sh_degree=sh_degree)
