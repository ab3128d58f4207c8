"""Forward rasterization of oriented disk splats.

Per pixel, camera rays are intersected with each splat's tangent plane.
The plane-space Gaussian is combined with a screen-space Gaussian around
the projected center (max of the two, an object-space low-pass filter),
and contributions are alpha-composited front to back in center-depth
order. Color, an arbitrary per-splat feature vector (identity by
default), depth and alpha share the same compositing weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SceneFormatError
from .model import quat_to_rotation, normalize_quaternions, sigmoid, sh_basis


@dataclass
class RenderOptions:
    sigma: float = 0.7071            # screen-space filter, pixels
    cutoff: float = 1.0 / 255.0      # skip contributions below this weight
    t_min: float = 1e-4              # stop compositing once T falls below
    alpha_clamp: float = 1.0 - 1e-7  # keeps 1/(1-a) finite in backward
    depth_mode: str = "median"       # "median" or "mean"
    median_threshold: float = 0.5
    background: tuple = (0.0, 0.0, 0.0)
    znear: float = 0.01
    max_pairs: int = 60_000_000
    pair_chunk: int = 2_000_000


@dataclass
class RenderResult:
    color: np.ndarray      # (H, W, 3)
    identity: np.ndarray   # (H, W, F)
    depth: np.ndarray      # (H, W)
    alpha: np.ndarray      # (H, W)
    count: np.ndarray      # (H, W) contributors per pixel
    cache: "RenderCache | None" = None


@dataclass
class RenderCache:
    """Everything the backward pass needs, in sorted contribution order."""
    camera: object
    options: RenderOptions
    keep: np.ndarray        # indices into the original model
    # per kept splat
    t_u: np.ndarray
    t_v: np.ndarray
    nrm: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    opac: np.ndarray
    quats_raw: np.ndarray
    z_c: np.ndarray
    proj: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    color_raw: np.ndarray
    colors: np.ndarray
    sh_coeffs: np.ndarray
    feats: np.ndarray
    feats_are_identities: bool
    sh_degree: int
    # per contribution, sorted by (pixel, depth rank), early-out trimmed
    sp: np.ndarray
    px: np.ndarray
    u: np.ndarray
    v: np.ndarray
    s_star: np.ndarray
    denom: np.ndarray
    valid: np.ndarray
    screen_branch: np.ndarray
    g_hat: np.ndarray
    a: np.ndarray
    clamped: np.ndarray
    trans: np.ndarray       # transmittance before each contribution
    d_pair: np.ndarray
    weights: np.ndarray
    starts: np.ndarray      # segment starts into the pair arrays
    seg_px: np.ndarray      # pixel id per segment
    t_fin: np.ndarray       # (H*W,) final transmittance
    alpha_flat: np.ndarray
    depth_mean_flat: np.ndarray
    median_pair: np.ndarray  # per segment, pair index of the T crossing or -1
    n_model: int


def segment_starts(sorted_ids):
    """Start offsets of equal-value runs in a sorted id array."""
    if sorted_ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(sorted_ids)) + 1
    return np.concatenate([[0], change])


def segmented_scan(values, starts, kind):
    """Per-segment inclusive cumsum or exclusive cumprod.

    Runs the scan inside a padded (segments x max_length) matrix so each
    output is the exact sequential partial product/sum, batched over rows
    to bound memory.
    """
    values = np.ascontiguousarray(values)
    n = values.shape[0]
    out = np.empty_like(values)
    if n == 0:
        return out
    ns = starts.shape[0]
    lengths = np.diff(np.append(starts, n))
    pos = np.arange(n, dtype=np.int64) - np.repeat(starts, lengths)
    rows_per = max(1, int(4_000_000 // max(int(lengths.max()), 1)))
    for r0 in range(0, ns, rows_per):
        r1 = min(r0 + rows_per, ns)
        i0 = int(starts[r0])
        i1 = int(starts[r1]) if r1 < ns else n
        rows = r1 - r0
        lb = int(lengths[r0:r1].max())
        rr = np.repeat(np.arange(rows), lengths[r0:r1])
        pp = pos[i0:i1]
        if kind == "prod":
            mat = np.ones((rows, lb + 1), dtype=values.dtype)
            mat[rr, pp + 1] = values[i0:i1]
            np.cumprod(mat, axis=1, out=mat)
            out[i0:i1] = mat[rr, pp]  # exclusive: read one column back
        else:
            mat = np.zeros((rows, lb), dtype=values.dtype)
            mat[rr, pp] = values[i0:i1]
            np.cumsum(mat, axis=1, out=mat)
            out[i0:i1] = mat[rr, pp]
    return out


def filtered_weight(g_uv, x, c, sigma):
    """max of the object-space weight and a screen Gaussian around c."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d2 = np.sum((x - c) ** 2, axis=-1)
    return np.maximum(g_uv, np.exp(-0.5 * d2 / (sigma * sigma)))


def ray_splat_intersect(camera, pixel, model, index=0):
    """Intersect one pixel's camera ray with one splat's tangent plane.

    Returns (u, v, depth) with (u, v) in scale-normalized plane units,
    or None when the ray is parallel to the plane or the hit lies behind
    the camera. `pixel` is (column, row); the ray samples its center.
    """
    col, row = pixel
    d_cam = np.array([(col + 0.5 - camera.cx) / camera.fx,
                      (row + 0.5 - camera.cy) / camera.fy, 1.0])
    d = camera.R.T @ d_cam
    origin = camera.center
    R = quat_to_rotation(normalize_quaternions(model.quats[index]))
    nrm = R[:, 2]
    denom = float(d @ nrm)
    if abs(denom) < 1e-9:
        return None
    p = model.centers[index]
    s_star = float((p - origin) @ nrm) / denom
    if s_star <= 0.0:
        return None
    r = origin + s_star * d - p
    s = np.exp(model.log_scales[index])
    return float(r @ R[:, 0]) / s[0], float(r @ R[:, 1]) / s[1], s_star


def _frustum_cull_and_bboxes(centers, scales, t_u, t_v, camera, options):
    """Conservative per-splat pixel bounding boxes.

    The object-space kernel reaches the cutoff only inside the disk's
    rho-ellipse, whose support along a camera axis e is
    rho*hypot(s_u t_u.e, s_v t_v.e); the screen-space branch only within
    rho*sigma of the projected center. The box is the union of both.
    """
    rho = np.sqrt(2.0 * np.log(1.0 / options.cutoff))
    r_scr = rho * options.sigma
    cam = centers @ camera.R.T + camera.t
    z = cam[:, 2]
    alive = z > options.znear
    # per-camera-axis extent of the rho-ellipse
    tu_cam = t_u @ camera.R.T
    tv_cam = t_v @ camera.R.T
    h = rho * np.hypot(scales[:, :1] * tu_cam, scales[:, 1:] * tv_cam)
    zlo = np.maximum(z - h[:, 2], options.znear)
    zhi = np.maximum(z + h[:, 2], options.znear)
    with np.errstate(divide="ignore", invalid="ignore"):
        # x/z extrema over the camera-space box occur at its corners
        xs = np.stack([(cam[:, 0] - h[:, 0]) / zlo, (cam[:, 0] - h[:, 0]) / zhi,
                       (cam[:, 0] + h[:, 0]) / zlo, (cam[:, 0] + h[:, 0]) / zhi])
        ys = np.stack([(cam[:, 1] - h[:, 1]) / zlo, (cam[:, 1] - h[:, 1]) / zhi,
                       (cam[:, 1] + h[:, 1]) / zlo, (cam[:, 1] + h[:, 1]) / zhi])
        cpx = camera.fx * cam[:, 0] / z + camera.cx
        cpy = camera.fy * cam[:, 1] / z + camera.cy
    x_lo = np.minimum(camera.fx * xs.min(axis=0) + camera.cx, cpx - r_scr)
    x_hi = np.maximum(camera.fx * xs.max(axis=0) + camera.cx, cpx + r_scr)
    y_lo = np.minimum(camera.fy * ys.min(axis=0) + camera.cy, cpy - r_scr)
    y_hi = np.maximum(camera.fy * ys.max(axis=0) + camera.cy, cpy + r_scr)
    # pixel index range whose centers (ix + 0.5) fall inside [lo, hi]
    x0 = np.maximum(np.ceil(x_lo - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(x_hi - 0.5), camera.width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(y_lo - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(y_hi - 0.5), camera.height - 1).astype(np.int64)
    alive &= (x1 >= x0) & (y1 >= y0)
    return alive, x0, x1, y0, y1, z


def _empty_result(camera, options, n_feat, want_cache, n_model):
    h, w = camera.height, camera.width
    bg = np.asarray(options.background, dtype=np.float64)
    color = np.broadcast_to(bg, (h, w, 3)).copy()
    res = RenderResult(
        color=color,
        identity=np.zeros((h, w, n_feat)),
        depth=np.zeros((h, w)),
        alpha=np.zeros((h, w)),
        count=np.zeros((h, w), dtype=np.int32))
    if want_cache:
        e = np.zeros(0)
        ei = np.zeros(0, dtype=np.int64)
        eb = np.zeros(0, dtype=bool)
        e3 = np.zeros((0, 3))
        res.cache = RenderCache(
            camera=camera, options=options,
            keep=ei, t_u=e3, t_v=e3, nrm=e3, centers=e3,
            scales=np.zeros((0, 2)), opac=e, quats_raw=np.zeros((0, 4)),
            z_c=e, proj=np.zeros((0, 2)), view_dirs=e3, view_dist=e,
            color_raw=e3, colors=e3, sh_coeffs=np.zeros((0, 1, 3)),
            feats=np.zeros((0, n_feat)),
            feats_are_identities=True, sh_degree=0,
            sp=ei, px=ei, u=e, v=e, s_star=e, denom=e, valid=eb,
            screen_branch=eb, g_hat=e, a=e, clamped=eb, trans=e,
            d_pair=e, weights=e, starts=ei, seg_px=ei,
            t_fin=np.ones(h * w), alpha_flat=np.zeros(h * w),
            depth_mean_flat=np.zeros(h * w),
            median_pair=ei, n_model=n_model)
    return res


def render(model, camera, *, features=None, options=None, want_cache=False):
    """Rasterize the model into color/feature/depth/alpha maps.

    features: (N, F) per-splat vectors composited with the same weights
    as color; defaults to the model's identity vectors.
    """
    if options is None:
        options = RenderOptions()
    if options.depth_mode not in ("median", "mean"):
        raise ValueError(f"unknown depth_mode {options.depth_mode!r}")
    h, w = camera.height, camera.width
    n = len(model)
    feats_are_identities = features is None
    feats_all = model.identities if features is None else np.asarray(features)
    if feats_all.ndim != 2 or feats_all.shape[0] != n:
        raise ValueError("features must be (N, F)")
    n_feat = feats_all.shape[1]
    if n == 0:
        return _empty_result(camera, options, n_feat, want_cache, n)

    quats_raw = model.quats.astype(np.float64)
    rot = quat_to_rotation(normalize_quaternions(quats_raw))
    centers = model.centers.astype(np.float64)
    scales = np.exp(model.log_scales.astype(np.float64))
    opac = sigmoid(model.opacity_logits.astype(np.float64))

    alive, bx0, bx1, by0, by1, z_all = _frustum_cull_and_bboxes(
        centers, scales, rot[:, :, 0], rot[:, :, 1], camera, options)
    keep = np.flatnonzero(alive)
    if keep.size == 0:
        return _empty_result(camera, options, n_feat, want_cache, n)

    t_u = rot[keep, :, 0]
    t_v = rot[keep, :, 1]
    nrm = rot[keep, :, 2]
    centers = centers[keep]
    scales = scales[keep]
    opac = opac[keep]
    quats_raw = quats_raw[keep]
    z_c = z_all[keep]
    feats = feats_all[keep].astype(np.float64)

    origin = camera.center
    proj, _ = camera.project(centers)

    # view-dependent color, evaluated at the splat center
    to_splat = centers - origin
    view_dist = np.linalg.norm(to_splat, axis=1)
    view_dirs = to_splat / np.maximum(view_dist, 1e-12)[:, None]
    basis = sh_basis(view_dirs, model.sh_degree)
    sh_coeffs = model.sh[keep].astype(np.float64)
    color_raw = np.einsum("nk,nkc->nc", basis, sh_coeffs) + 0.5
    colors = np.clip(color_raw, 0.0, 1.0)

    # pair generation, chunked over splats, compacted by the kernel cutoff
    ray_lut = camera.ray_directions().reshape(-1, 3)
    bw = bx1 - bx0 + 1
    bh = by1 - by0 + 1
    counts = (bw * bh)[keep]
    total_pairs = int(counts.sum())
    if total_pairs > options.max_pairs:
        raise MemoryError(
            f"render would generate {total_pairs} ray-splat pairs "
            f"(limit {options.max_pairs}); reduce scene or image size")
    bx0k, by0k, bwk = bx0[keep], by0[keep], bw[keep]

    sig2 = options.sigma * options.sigma
    s_num = np.einsum("ij,ij->i", centers - origin, nrm)
    inv_su = 1.0 / scales[:, 0]
    inv_sv = 1.0 / scales[:, 1]
    parts = {k: [] for k in ("sp", "px", "u", "v", "s", "den", "val",
                             "scr", "gh")}
    csum = np.concatenate([[0], np.cumsum(counts)])
    i = 0
    nk = keep.size
    while i < nk:
        j = i + 1
        while j < nk and csum[j + 1] - csum[i] <= options.pair_chunk:
            j += 1
        cnt = counts[i:j]
        sp = np.repeat(np.arange(i, j), cnt)
        off = np.arange(int(cnt.sum())) - np.repeat(csum[i:j] - csum[i], cnt)
        bwp = bwk[sp]
        pxx = bx0k[sp] + off % bwp
        pyy = by0k[sp] + off // bwp
        px = pyy * w + pxx

        d = ray_lut[px]
        den = np.einsum("ij,ij->i", d, nrm[sp])
        ok = np.abs(den) >= 1e-9
        den_safe = np.where(ok, den, 1.0)
        s_star = s_num[sp] / den_safe
        val = ok & (s_star > 0.0)
        r = origin + s_star[:, None] * d - centers[sp]
        uu = np.einsum("ij,ij->i", r, t_u[sp]) * inv_su[sp]
        vv = np.einsum("ij,ij->i", r, t_v[sp]) * inv_sv[sp]
        g_plane = np.where(val, np.exp(-0.5 * (uu * uu + vv * vv)), 0.0)
        delta = np.stack([pxx + 0.5, pyy + 0.5], axis=1) - proj[sp]
        g_screen = np.exp(-0.5 * (delta * delta).sum(axis=1) / sig2)
        scr = g_screen > g_plane  # ties stay on the object-space branch
        gh = np.where(scr, g_screen, g_plane)

        m = gh >= options.cutoff
        parts["sp"].append(sp[m])
        parts["px"].append(px[m])
        parts["u"].append(uu[m])
        parts["v"].append(vv[m])
        parts["s"].append(s_star[m])
        parts["den"].append(den_safe[m])
        parts["val"].append(val[m])
        parts["scr"].append(scr[m])
        parts["gh"].append(gh[m])
        i = j

    sp = np.concatenate(parts["sp"])
    if sp.size == 0:
        return _empty_result(camera, options, n_feat, want_cache, n)
    px = np.concatenate(parts["px"])
    u = np.concatenate(parts["u"])
    v = np.concatenate(parts["v"])
    s_star = np.concatenate(parts["s"])
    denom = np.concatenate(parts["den"])
    valid = np.concatenate(parts["val"])
    screen_branch = np.concatenate(parts["scr"])
    g_hat = np.concatenate(parts["gh"])
    del parts

    # global front-to-back order by center depth, ties by splat index
    order_by_depth = np.argsort(z_c, kind="stable")
    rank = np.empty(nk, dtype=np.int64)
    rank[order_by_depth] = np.arange(nk)
    perm = np.lexsort((rank[sp], px))
    sp, px = sp[perm], px[perm]
    u, v, s_star, denom = u[perm], v[perm], s_star[perm], denom[perm]
    valid, screen_branch, g_hat = valid[perm], screen_branch[perm], g_hat[perm]

    a = opac[sp] * g_hat
    clamped = a > options.alpha_clamp
    a = np.minimum(a, options.alpha_clamp)

    starts = segment_starts(px)
    trans = segmented_scan(1.0 - a, starts, "prod")

    # stop compositing where transmittance is exhausted
    live = trans >= options.t_min
    if not live.all():
        sp, px, u, v = sp[live], px[live], u[live], v[live]
        s_star, denom = s_star[live], denom[live]
        valid, screen_branch = valid[live], screen_branch[live]
        g_hat, a, clamped, trans = g_hat[live], a[live], clamped[live], trans[live]
        starts = segment_starts(px)

    seg_px = px[starts]
    weights = trans * a
    d_pair = np.where(valid, s_star, z_c[sp])

    hw = h * w
    alpha_flat = np.bincount(px, weights=weights, minlength=hw)
    count_flat = np.bincount(px, minlength=hw).astype(np.int32)
    color_flat = np.empty((hw, 3))
    for ch in range(3):
        color_flat[:, ch] = np.bincount(px, weights=weights * colors[sp, ch],
                                        minlength=hw)
    ident_flat = np.empty((hw, n_feat))
    for ch in range(n_feat):
        ident_flat[:, ch] = np.bincount(px, weights=weights * feats[sp, ch],
                                        minlength=hw)

    ends = np.append(starts[1:], px.shape[0]) - 1
    t_fin = np.ones(hw)
    t_fin[seg_px] = trans[ends] * (1.0 - a[ends])

    bg = np.asarray(options.background, dtype=np.float64)
    color_flat += t_fin[:, None] * bg[None, :]

    depth_sum = np.bincount(px, weights=weights * d_pair, minlength=hw)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth_mean_flat = np.where(alpha_flat > 0, depth_sum / alpha_flat, 0.0)

    # median depth: first contribution that drains T below the threshold
    t_after = trans * (1.0 - a)
    big = px.shape[0]
    cand = np.where(t_after < options.median_threshold,
                    np.arange(big, dtype=np.int64), big)
    first = np.minimum.reduceat(cand, starts) if starts.size else np.zeros(0, np.int64)
    median_pair = np.where(first < big, first, -1)
    depth_med_flat = np.zeros(hw)
    hit = median_pair >= 0
    depth_med_flat[seg_px[hit]] = d_pair[median_pair[hit]]

    depth_flat = depth_med_flat if options.depth_mode == "median" else depth_mean_flat

    res = RenderResult(
        color=color_flat.reshape(h, w, 3),
        identity=ident_flat.reshape(h, w, n_feat),
        depth=depth_flat.reshape(h, w),
        alpha=alpha_flat.reshape(h, w),
        count=count_flat.reshape(h, w))
    if want_cache:
        res.cache = RenderCache(
            camera=camera, options=options, keep=keep,
            t_u=t_u, t_v=t_v, nrm=nrm, centers=centers, scales=scales,
            opac=opac, quats_raw=quats_raw, z_c=z_c, proj=proj,
            view_dirs=view_dirs, view_dist=view_dist,
            color_raw=color_raw, colors=colors, sh_coeffs=sh_coeffs,
            feats=feats,
            feats_are_identities=feats_are_identities,
            sh_degree=model.sh_degree,
            sp=sp, px=px, u=u, v=v, s_star=s_star, denom=denom,
            valid=valid, screen_branch=screen_branch, g_hat=g_hat, a=a,
            clamped=clamped, trans=trans, d_pair=d_pair, weights=weights,
            starts=starts, seg_px=seg_px, t_fin=t_fin,
            alpha_flat=alpha_flat, depth_mean_flat=depth_mean_flat,
            median_pair=median_pair, n_model=n)
    return res


def render_depth(model, camera, options=None):
    """Median depth map for fusion; 0 where no surface was crossed."""
    if options is None:
        options = RenderOptions()
    elif options.depth_mode != "median":
        from dataclasses import replace
        options = replace(options, depth_mode="median")
    out = render(model, camera, options=options)
    return out.depth, out.alpha
