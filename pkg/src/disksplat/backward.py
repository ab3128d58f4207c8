"""Analytic backward pass through the rasterizer.

Consumes the forward cache plus upstream gradients on any rendered
output (color, identity/features, alpha, depth) and produces gradients
for every splat parameter. The compositing chain is differentiated in
closed form: with a_i the filtered alpha of the i-th contribution and
w_i = T_i a_i,

    dL/da_i = T_i phi_i - (sum_{k>i} w_k phi_k + T_fin * gB) / (1 - a_i)

where phi_i collects the upstream terms that multiply w_i and gB is the
background's color gradient. Geometry gradients then flow through the
ray-plane intersection, the kernel, the max filter subgradient and the
quaternion normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (IDENTITY_DIM, normalize_quaternions, quat_rotation_jacobian,
                    quat_to_rotation, sh_basis, sh_basis_grad)
from .render import segmented_scan


@dataclass
class GradientBuffer:
    centers: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    identities: np.ndarray
    features: np.ndarray | None = None  # set when custom features were rendered

    FIELDS = ("centers", "quats", "log_scales", "opacity_logits", "sh",
              "identities")

    @staticmethod
    def zeros(n, sh_degree, feat_dim=None):
        k = (sh_degree + 1) ** 2
        return GradientBuffer(
            centers=np.zeros((n, 3)),
            quats=np.zeros((n, 4)),
            log_scales=np.zeros((n, 2)),
            opacity_logits=np.zeros(n),
            sh=np.zeros((n, k, 3)),
            identities=np.zeros((n, IDENTITY_DIM)),
            features=None if feat_dim is None else np.zeros((n, feat_dim)))

    def add_(self, other):
        for f in self.FIELDS:
            getattr(self, f).__iadd__(getattr(other, f))
        return self

    def finite(self):
        return all(np.all(np.isfinite(getattr(self, f))) for f in self.FIELDS)


def render_backward(cache, d_color=None, d_identity=None, d_alpha=None,
                    d_depth=None, sh_degree=None):
    """Backpropagate upstream image-space gradients to splat parameters.

    cache: RenderCache from render(..., want_cache=True). Upstream
    arrays are (H, W, 3), (H, W, F), (H, W), (H, W); missing ones are
    treated as zero.
    """
    if sh_degree is None:
        sh_degree = cache.sh_degree
    cam = cache.camera
    opt = cache.options
    h, w = cam.height, cam.width
    hw = h * w
    n_model = cache.n_model
    nk = cache.keep.size
    n_feat = cache.feats.shape[1] if cache.feats.ndim == 2 else IDENTITY_DIM
    buf = GradientBuffer.zeros(n_model, sh_degree,
                               None if cache.feats_are_identities else n_feat)
    if cache.sp.size == 0 or nk == 0:
        return buf

    gc = (np.zeros((hw, 3)) if d_color is None
          else np.asarray(d_color, dtype=np.float64).reshape(hw, 3))
    gf = (np.zeros((hw, n_feat)) if d_identity is None
          else np.asarray(d_identity, dtype=np.float64).reshape(hw, n_feat))
    ga = (np.zeros(hw) if d_alpha is None
          else np.asarray(d_alpha, dtype=np.float64).reshape(hw))
    gd = (np.zeros(hw) if d_depth is None
          else np.asarray(d_depth, dtype=np.float64).reshape(hw))

    sp, px = cache.sp, cache.px
    a, trans, weights = cache.a, cache.trans, cache.weights
    starts = cache.starts
    n_pairs = sp.size
    lengths = np.diff(np.append(starts, n_pairs))
    seg_of = np.repeat(np.arange(starts.size), lengths)

    # phi: the upstream factor multiplying w_i for each contribution
    phi = np.einsum("pc,pc->p", gc[px], cache.colors[sp])
    phi += np.einsum("pc,pc->p", gf[px], cache.feats[sp])
    phi += ga[px]

    gd_pair = np.zeros(n_pairs)
    if opt.depth_mode == "mean":
        alpha_px = cache.alpha_flat[px]
        ok = alpha_px > 1e-12
        dm = cache.depth_mean_flat[px]
        phi += np.where(ok, gd[px] * (cache.d_pair - dm) / np.where(ok, alpha_px, 1.0), 0.0)
        gd_pair = np.where(ok, gd[px] * weights / np.where(ok, alpha_px, 1.0), 0.0)
    else:
        med = cache.median_pair
        hit = med >= 0
        gd_pair[med[hit]] = gd[cache.seg_px[hit]]

    # dL/da via per-segment suffix sums of psi = w * phi
    psi = weights * phi
    seg_total = np.add.reduceat(psi, starts) if starts.size else np.zeros(0)
    incl = segmented_scan(psi, starts, "sum")
    suffix = seg_total[seg_of] - incl
    bg = np.asarray(opt.background, dtype=np.float64)
    g_bg_px = gc @ bg                       # (HW,)
    tail = cache.t_fin[px] * g_bg_px[px]
    da = trans * phi - (suffix + tail) / (1.0 - a)
    da[cache.clamped] = 0.0

    # a = opacity * G_hat
    do_pair = da * cache.g_hat
    dg_pair = da * cache.opac[sp]

    # filter max: route to the winning branch
    scr = cache.screen_branch
    pl = ~scr & cache.valid
    du = np.zeros(n_pairs)
    dv = np.zeros(n_pairs)
    g_plane = cache.g_hat[pl]
    du[pl] = dg_pair[pl] * (-cache.u[pl]) * g_plane
    dv[pl] = dg_pair[pl] * (-cache.v[pl]) * g_plane

    # screen branch: gradient reaches the projected center
    d_proj = np.zeros((nk, 2))
    if scr.any():
        pxx = (px[scr] % w).astype(np.float64) + 0.5
        pyy = (px[scr] // w).astype(np.float64) + 0.5
        delta = np.stack([pxx, pyy], axis=1) - cache.proj[sp[scr]]
        coef = dg_pair[scr] * cache.g_hat[scr] / (opt.sigma * opt.sigma)
        contrib = coef[:, None] * delta
        for c in range(2):
            d_proj[:, c] = np.bincount(sp[scr], weights=contrib[:, c],
                                       minlength=nk)

    # depth source: intersection where valid, camera-space center z else
    ds_pair = np.where(cache.valid, gd_pair, 0.0)
    dz_c = np.bincount(sp, weights=np.where(cache.valid, 0.0, gd_pair),
                       minlength=nk)

    # ray-plane intersection chain on valid contributions
    val = cache.valid
    ray_lut = cam.ray_directions().reshape(-1, 3)
    dvec = ray_lut[px[val]]
    spv = sp[val]
    t_u, t_v, nrm = cache.t_u[spv], cache.t_v[spv], cache.nrm[spv]
    su = cache.scales[spv, 0]
    sv = cache.scales[spv, 1]
    denom = cache.denom[val]
    origin = cam.center
    r = origin + cache.s_star[val, None] * dvec - cache.centers[spv]
    dtu_dot = np.einsum("ij,ij->i", dvec, t_u)
    dtv_dot = np.einsum("ij,ij->i", dvec, t_v)
    duv, dvv, dsv = du[val], dv[val], ds_pair[val]

    cu = duv / su
    cv = dvv / sv
    dp_pair = (cu * dtu_dot / denom + cv * dtv_dot / denom + dsv / denom)[:, None] * nrm
    dp_pair -= cu[:, None] * t_u + cv[:, None] * t_v
    dn_pair = -((cu * dtu_dot + cv * dtv_dot + dsv) / denom)[:, None] * r
    dtu_pair = cu[:, None] * r
    dtv_pair = cv[:, None] * r
    dlsu_pair = duv * (-cache.u[val])
    dlsv_pair = dvv * (-cache.v[val])

    def _acc3(idx, vals, size):
        out = np.empty((size, 3))
        for c in range(3):
            out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=size)
        return out

    d_center = _acc3(spv, dp_pair, nk)
    d_tu = _acc3(spv, dtu_pair, nk)
    d_tv = _acc3(spv, dtv_pair, nk)
    d_n = _acc3(spv, dn_pair, nk)
    d_ls = np.stack([np.bincount(spv, weights=dlsu_pair, minlength=nk),
                     np.bincount(spv, weights=dlsv_pair, minlength=nk)], axis=1)
    d_opac = np.bincount(sp, weights=do_pair, minlength=nk)

    # center-z depth fallback: z_c = (R p + t)[2]
    d_center += dz_c[:, None] * cam.R[2][None, :]

    # projected center -> center via the perspective Jacobian
    cam_pts = cache.centers @ cam.R.T + cam.t
    x_c, y_c, z_c = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
    gx, gy = d_proj[:, 0], d_proj[:, 1]
    d_cam = np.stack([cam.fx * gx / z_c,
                      cam.fy * gy / z_c,
                      -(cam.fx * gx * x_c + cam.fy * gy * y_c) / (z_c * z_c)],
                     axis=1)
    d_center += d_cam @ cam.R

    # color path: d raw SH color, clip subgradient, then coefficients
    d_raw = np.empty((nk, 3))
    for c in range(3):
        d_raw[:, c] = np.bincount(sp, weights=weights * gc[px, c], minlength=nk)
    inside = (cache.color_raw > 0.0) & (cache.color_raw < 1.0)
    d_raw *= inside
    basis = sh_basis(cache.view_dirs, sh_degree)
    d_sh = np.einsum("nk,nc->nkc", basis, d_raw)
    if sh_degree > 0:
        gbasis = sh_basis_grad(cache.view_dirs, sh_degree)
        # d dir_j = sum_k,c d_raw_c * sh_kc * dbasis_k/d dir_j
        d_dir = np.einsum("nc,nkc,nkj->nj", d_raw, cache.sh_coeffs, gbasis)
        # direction is a normalized difference; project out the radial part
        dist = np.maximum(cache.view_dist, 1e-12)
        proj_perp = d_dir - np.einsum("nj,nj->n", d_dir, cache.view_dirs)[:, None] * cache.view_dirs
        d_center += proj_perp / dist[:, None]

    # feature / identity path
    d_feat = np.empty((nk, n_feat))
    for c in range(n_feat):
        d_feat[:, c] = np.bincount(sp, weights=weights * gf[px, c], minlength=nk)

    # chain rotations to the stored quaternion
    qhat = normalize_quaternions(cache.quats_raw)
    jac = quat_rotation_jacobian(qhat)       # (nk, 4, 3, 3): dR_ij/dq_l
    d_q_unit = (np.einsum("nli,ni->nl", jac[:, :, :, 0], d_tu)
                + np.einsum("nli,ni->nl", jac[:, :, :, 1], d_tv)
                + np.einsum("nli,ni->nl", jac[:, :, :, 2], d_n))
    norms = np.linalg.norm(cache.quats_raw, axis=1, keepdims=True)
    inner = np.einsum("nl,nl->n", d_q_unit, qhat)
    d_q = (d_q_unit - inner[:, None] * qhat) / norms

    opac = cache.opac
    d_logit = d_opac * opac * (1.0 - opac)

    keep = cache.keep
    buf.centers[keep] = d_center
    buf.quats[keep] = d_q
    buf.log_scales[keep] = d_ls
    buf.opacity_logits[keep] = d_logit
    buf.sh[keep] = d_sh
    if cache.feats_are_identities:
        buf.identities[keep] = d_feat
    else:
        buf.features = np.zeros((n_model, n_feat))
        buf.features[keep] = d_feat
    return buf
