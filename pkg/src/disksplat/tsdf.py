"""Depth-map fusion into a truncated signed distance volume, and
isosurface extraction with marching cubes.

Distances are signed along camera rays, normalized by the truncation
band: +1 in observed free space well in front of the surface, negative
behind it. Updates stop one truncation band behind the surface so
occluded space stays unobserved instead of being carved away.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from ._mc_tables import CORNER_OFFSETS, EDGE_TABLE, TRI_COUNTS, TRI_TABLE
from .errors import MeshingError
from .render import render_depth

MAX_WEIGHT = 64.0


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64
    normals: np.ndarray | None = None  # optional (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def validate(self):
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise MeshingError("triangle indices out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshingError("mesh has non-finite vertices")

    def areas(self):
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self):
        return float(self.areas().sum())

    def sample_surface(self, count, rng):
        """Area-uniform point samples on the mesh surface."""
        if len(self.triangles) == 0:
            return np.zeros((0, 3))
        areas = self.areas()
        total = areas.sum()
        if total <= 0:
            raise MeshingError("mesh has zero surface area")
        tri = rng.choice(len(areas), size=count, p=areas / total)
        # uniform barycentric sampling by square-root reflection
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        a = self.vertices[self.triangles[tri, 0]]
        b = self.vertices[self.triangles[tri, 1]]
        c = self.vertices[self.triangles[tri, 2]]
        return ((1.0 - r1)[:, None] * a
                + (r1 * (1.0 - r2))[:, None] * b
                + (r1 * r2)[:, None] * c)

    def signed_volume(self):
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def boundary_edge_count(self):
        """Edges used by exactly one triangle (0 for a closed surface)."""
        if len(self.triangles) == 0:
            return 0
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int((counts == 1).sum())


@dataclass
class TsdfVolume:
    """Voxel grid of truncation-normalized signed distances in [-1, 1].

    Samples live at origin + (i, j, k) * voxel_size with i in
    [0, dims[0]); marching cubes runs over the dims-1 cells per axis.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple
    trunc: float
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if min(self.dims) < 2:
            raise MeshingError("volume needs at least 2 samples per axis")
        if self.voxel_size <= 0 or self.trunc <= 0:
            raise MeshingError("voxel_size and trunc must be positive")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float64)

    @staticmethod
    def for_bounds(bounds_min, bounds_max, voxel_size, trunc=None):
        lo = np.asarray(bounds_min, dtype=np.float64)
        hi = np.asarray(bounds_max, dtype=np.float64)
        if voxel_size <= 0:
            raise MeshingError("voxel_size must be positive")
        if np.any(hi <= lo):
            raise MeshingError("empty bounds")
        trunc = 4.0 * voxel_size if trunc is None else float(trunc)
        lo = lo - trunc
        hi = hi + trunc
        dims = tuple(max(2, int(np.ceil((hi[a] - lo[a]) / voxel_size)) + 1)
                     for a in range(3))
        return TsdfVolume(origin=lo, voxel_size=voxel_size, dims=dims,
                          trunc=trunc)

    def grid_points(self, k_lo, k_hi):
        """World positions of grid samples in the z-index slab [k_lo, k_hi)."""
        nx, ny, _ = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny),
                                 np.arange(k_lo, k_hi), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.origin + idx * self.voxel_size


def tsdf_integrate(volume, depth, alpha, camera, slab=2_000_000,
                   max_slope=2.5):
    """Fuse one rendered depth map into the volume.

    Pixels with alpha below 0.5 carry no surface and are skipped, as are
    pixels whose depth changes too steeply against a 4-neighbor: median
    depth is unreliable where a ray grazes a silhouette, and fusing
    those samples smears phantom surface into the truncation band. The
    allowed change per pixel is max_slope times the pixel's world size
    at its depth, capped at the truncation distance; max_slope=None
    disables the rejection. Voxels more than one truncation band behind
    the observed surface are left untouched; nearer voxels take the
    running weighted mean of the clamped normalized distance, with the
    weight capped.
    """
    h, w = depth.shape
    if (h, w) != (camera.height, camera.width):
        raise MeshingError(
            f"depth map {h}x{w} does not match camera "
            f"{camera.height}x{camera.width}")
    nx, ny, nz = volume.dims
    per_slab = max(1, int(slab // (nx * ny)))
    valid_px = (alpha >= 0.5) & (depth > 0)
    if max_slope is not None:
        lim = np.minimum(volume.trunc,
                         max_slope * depth / min(camera.fx, camera.fy))
        pad_ok = np.pad(valid_px, 1, constant_values=False)
        pad_d = np.pad(depth, 1)
        smooth = np.ones_like(valid_px)
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb_ok = pad_ok[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            nb_d = pad_d[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            smooth &= nb_ok & (np.abs(depth - nb_d) <= lim)
        valid_px &= smooth
    for k0 in range(0, nz, per_slab):
        k1 = min(nz, k0 + per_slab)
        pts = volume.grid_points(k0, k1)
        px, z = camera.project(pts)
        cols = np.floor(px[:, 0]).astype(np.int64)
        rows = np.floor(px[:, 1]).astype(np.int64)
        ok = (z > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        ok[ok] = valid_px[rows[ok], cols[ok]]
        if not ok.any():
            continue
        sdf = np.zeros(len(pts))
        sdf[ok] = depth[rows[ok], cols[ok]] - z[ok]
        upd = ok & (sdf > -volume.trunc)
        if not upd.any():
            continue
        # slab sample order is (i, j, k) C-order, k fastest
        lin = np.flatnonzero(upd)
        kw = k1 - k0
        ii = lin // (ny * kw)
        jj = (lin % (ny * kw)) // kw
        kk = lin % kw + k0
        tsd = np.clip(sdf[upd] / volume.trunc, -1.0, 1.0)
        wold = volume.weight[ii, jj, kk]
        vold = volume.tsdf[ii, jj, kk]
        volume.tsdf[ii, jj, kk] = (vold * wold + tsd) / (wold + 1.0)
        volume.weight[ii, jj, kk] = np.minimum(wold + 1.0, MAX_WEIGHT)
    return volume


def marching_cubes(volume, iso=0.0):
    """Triangulate a level set of the volume.

    Cells touching any unobserved voxel (zero weight) are skipped, so
    the mesh only covers space the depth maps actually saw. Shared cube
    edges produce a single vertex.
    """
    vals = volume.tsdf - iso
    wts = volume.weight
    nx, ny, nz = (d - 1 for d in volume.dims)

    corner_vals = np.empty((nx, ny, nz, 8))
    observed = np.ones((nx, ny, nz), dtype=bool)
    for ci, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        corner_vals[..., ci] = vals[ox:nx + ox, oy:ny + oy, oz:nz + oz]
        observed &= wts[ox:nx + ox, oy:ny + oy, oz:nz + oz] > 0

    case = np.zeros((nx, ny, nz), dtype=np.int32)
    for ci in range(8):
        case |= (corner_vals[..., ci] < 0).astype(np.int32) << ci
    active = observed & (EDGE_TABLE[case] != 0)
    cell_idx = np.flatnonzero(active.reshape(-1))
    if cell_idx.size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    cases = case.reshape(-1)[cell_idx]
    ci_, cj_, ck_ = np.unravel_index(cell_idx, (nx, ny, nz))

    # global key for each (cell, edge) pair: axis and lower grid corner
    edge_axis = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2])
    edge_base = np.array([
        [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
        [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    ])
    gx, gy, gz = volume.dims

    pair_cell = []
    pair_edge = []
    for e in range(12):
        rows = np.flatnonzero((EDGE_TABLE[cases] >> e) & 1)
        pair_cell.append(rows)
        pair_edge.append(np.full(rows.size, e, dtype=np.int32))
    pair_cell = np.concatenate(pair_cell)
    pair_edge = np.concatenate(pair_edge)

    bi = ci_[pair_cell] + edge_base[pair_edge, 0]
    bj = cj_[pair_cell] + edge_base[pair_edge, 1]
    bk = ck_[pair_cell] + edge_base[pair_edge, 2]
    ax = edge_axis[pair_edge]
    key = ((ax * gx + bi) * gy + bj) * gz + bk
    uniq_keys, inverse = np.unique(key, return_inverse=True)

    # interpolate one vertex per unique global edge
    u_ax = uniq_keys // (gx * gy * gz)
    rem = uniq_keys % (gx * gy * gz)
    u_i = rem // (gy * gz)
    u_j = rem % (gy * gz) // gz
    u_k = rem % gz
    step = np.zeros((uniq_keys.size, 3), dtype=np.int64)
    step[np.arange(uniq_keys.size), u_ax] = 1
    v1 = vals[u_i, u_j, u_k]
    v2 = vals[u_i + step[:, 0], u_j + step[:, 1], u_k + step[:, 2]]
    denom = v2 - v1
    safe = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    t = np.clip(np.where(np.abs(denom) < 1e-300, 0.5, -v1 / safe), 0.0, 1.0)
    base_pos = volume.origin + np.stack([u_i, u_j, u_k], axis=1) * volume.voxel_size
    verts = base_pos + (t[:, None] * volume.voxel_size) * step

    # map (local cell, edge) -> vertex id, then emit triangles per slot
    lookup = np.full((cell_idx.size, 12), -1, dtype=np.int64)
    lookup[pair_cell, pair_edge] = inverse
    tris = []
    counts = TRI_COUNTS[cases]
    for slot in range(5):
        rows = np.flatnonzero(counts > slot)
        if rows.size == 0:
            break
        e3 = TRI_TABLE[cases[rows], 3 * slot:3 * slot + 3]
        tris.append(np.stack([lookup[rows, e3[:, 0]],
                              lookup[rows, e3[:, 1]],
                              lookup[rows, e3[:, 2]]], axis=1))
    triangles = np.concatenate(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    # distances are positive outside, so the table's winding needs a flip
    # for outward-facing normals
    triangles = triangles[:, [0, 2, 1]]
    return TriangleMesh(vertices=verts, triangles=triangles)


def filter_components(mesh, min_triangles=50):
    """Drop connected components with fewer than `min_triangles` faces."""
    if len(mesh.triangles) == 0 or min_triangles <= 1:
        return mesh
    nv = len(mesh.vertices)
    t = mesh.triangles
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    adj = sparse.coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)),
                            shape=(nv, nv))
    n_comp, labels = csgraph.connected_components(adj, directed=False)
    face_comp = labels[t[:, 0]]
    tri_per_comp = np.bincount(face_comp, minlength=n_comp)
    keep_face = tri_per_comp[face_comp] >= min_triangles
    kept = t[keep_face]
    used = np.zeros(nv, dtype=bool)
    used[kept.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    return TriangleMesh(vertices=mesh.vertices[used],
                        triangles=remap[kept])


@dataclass
class MeshingConfig:
    voxel_size: float | None = None   # default: scene diagonal / 256
    trunc: float | None = None        # default: 4 * voxel_size
    min_component_triangles: int = 50


def extract_mesh(model, cameras, config=None, *, bounds=None, options=None):
    """Fused mesh of the model surface seen from the given cameras.

    Renders a median depth map per camera, fuses them into a truncated
    signed distance volume, triangulates the zero set, and removes tiny
    floating components. Raises MeshingError when nothing is left; a
    smaller voxel_size resolves most such failures on thin geometry.
    """
    config = MeshingConfig() if config is None else config
    if len(model) == 0:
        raise MeshingError("model has no splats")
    if not cameras:
        raise MeshingError("no cameras to fuse")
    if bounds is None:
        lo, hi = model.bounds()
        pad = 2.0 * float(model.scales.max(initial=0.0))
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise MeshingError("model bounds are degenerate")
    voxel = config.voxel_size if config.voxel_size is not None else diag / 256.0
    volume = TsdfVolume.for_bounds(lo, hi, voxel, trunc=config.trunc)
    for cam in cameras:
        depth, alpha = render_depth(model, cam, options=options)
        tsdf_integrate(volume, depth, alpha, cam)
    mesh = marching_cubes(volume)
    mesh = filter_components(mesh, config.min_component_triangles)
    if len(mesh.triangles) == 0:
        raise MeshingError(
            "fusion produced an empty mesh; the surface may be thinner than "
            f"the voxel size ({voxel:.4g}), try a smaller voxel_size or "
            "truncation band")
    return mesh
