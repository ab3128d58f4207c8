"""Synthetic testbed: scenes with analytic ground truth.

Splats are sampled on parametric shape surfaces (spheres, boxes, plane
rectangles) with tangent frames aligned to the surface normals. The
supervision images and label maps are produced by the engine's own
rasterizer, so photometric and segmentation targets are self-consistent
by construction. Ground-truth per-splat object IDs are kept separately
from the trainable identity vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import look_at
from .model import (IDENTITY_DIM, SplatModel, frames_from_normals,
                    inverse_sigmoid, rgb_to_dc)
from .render import RenderOptions, render
from .sceneio import (SceneManifest, SceneView, save_checkpoint, save_image,
                      save_label_map, save_manifest, save_points)
from .seghead import SegHead


@dataclass
class SynthObject:
    shape: str                      # "sphere" | "box" | "plane"
    object_id: int
    count: int
    color: tuple = (0.7, 0.7, 0.7)
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0             # sphere
    half_sizes: tuple = (1.0, 1.0, 1.0)  # box
    normal: tuple = (0.0, 0.0, 1.0)      # plane
    extents: tuple = (1.0, 1.0)          # plane half-extents


@dataclass
class SynthSpec:
    objects: list
    n_views: int = 24
    image_size: int = 64
    camera_radius_factor: float = 2.5
    elevations: tuple = (-35.0, -10.0, 18.0, 45.0)
    fov_deg: float = 55.0
    color_noise: float = 0.02
    overlap: float = 2.0            # disk radius vs mean surface spacing
    opacity: float = 0.98
    seed: int = 0

    def validate(self):
        if not self.objects:
            raise ValueError("spec has no objects")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be distinct")
        for o in self.objects:
            if not 1 <= o.object_id <= 255:
                raise ValueError(f"object id {o.object_id} outside [1, 255]")
            if o.count <= 0:
                raise ValueError("object splat counts must be positive")
            if o.shape not in ("sphere", "box", "plane"):
                raise ValueError(f"unknown shape {o.shape!r}")


@dataclass
class SynthScene:
    model: SplatModel          # ground-truth geometry + appearance
    gt_ids: np.ndarray         # (N,) planted object id per splat
    cameras: list
    images: list               # float arrays (H, W, 3)
    labels: list               # uint8 arrays (H, W)
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    spec: SynthSpec | None = None
    hole: dict | None = None   # set by plant_hole
    removed: SplatModel | None = None
    removed_ids: np.ndarray | None = None


def _sample_sphere(obj, rng):
    d = rng.normal(size=(obj.count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = np.asarray(obj.center) + obj.radius * d
    area = 4.0 * np.pi * obj.radius ** 2
    return pts, d, area


def _sample_box(obj, rng):
    hx, hy, hz = obj.half_sizes
    face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
    face_normals = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                             [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)
    probs = face_areas / face_areas.sum()
    faces = rng.choice(6, size=obj.count, p=probs)
    uv = rng.uniform(-1.0, 1.0, size=(obj.count, 2))
    pts = np.empty((obj.count, 3))
    half = np.array([hx, hy, hz])
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = uv[m, 0] * half[others[0]]
        pts[m, others[1]] = uv[m, 1] * half[others[1]]
    return np.asarray(obj.center) + pts, face_normals[faces], face_areas.sum()


def _sample_plane(obj, rng):
    n = np.asarray(obj.normal, dtype=np.float64)
    n /= np.linalg.norm(n)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t_u = np.cross(helper, n)
    t_u /= np.linalg.norm(t_u)
    t_v = np.cross(n, t_u)
    eu, ev = obj.extents
    uv = rng.uniform(-1.0, 1.0, size=(obj.count, 2))
    pts = (np.asarray(obj.center)
           + uv[:, :1] * eu * t_u + uv[:, 1:] * ev * t_v)
    normals = np.tile(n, (obj.count, 1))
    return pts, normals, 4.0 * eu * ev


_SAMPLERS = {"sphere": _sample_sphere, "box": _sample_box, "plane": _sample_plane}


def build_gt_model(spec, rng):
    """Ground-truth splats on the spec's surfaces, plus per-splat ids."""
    all_pts, all_normals, all_ids, all_colors, all_scales = [], [], [], [], []
    for obj in spec.objects:
        pts, normals, area = _SAMPLERS[obj.shape](obj, rng)
        radius = spec.overlap * np.sqrt(area / (obj.count * np.pi))
        colors = np.asarray(obj.color, dtype=np.float64) + \
            spec.color_noise * rng.normal(size=(obj.count, 3))
        colors = np.clip(colors, 0.02, 0.98)
        all_pts.append(pts)
        all_normals.append(normals)
        all_ids.append(np.full(obj.count, obj.object_id, dtype=np.int64))
        all_colors.append(colors)
        all_scales.append(np.full(obj.count, radius))
    pts = np.concatenate(all_pts)
    normals = np.concatenate(all_normals)
    ids = np.concatenate(all_ids)
    colors = np.concatenate(all_colors)
    radii = np.concatenate(all_scales)
    n = pts.shape[0]
    quats = frames_from_normals(normals, rng)
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = rgb_to_dc(colors)
    model = SplatModel(
        centers=pts,
        quats=quats,
        log_scales=np.log(radii)[:, None].repeat(2, axis=1),
        opacity_logits=np.full(n, float(inverse_sigmoid(spec.opacity))),
        sh=sh,
        identities=0.01 * rng.normal(size=(n, IDENTITY_DIM)),
        sh_degree=0)
    return model, ids


def ring_cameras(center, radius, spec):
    """Cameras on a ring around `center`, cycling elevations."""
    cams = []
    for i in range(spec.n_views):
        az = 2.0 * np.pi * i / spec.n_views
        el = np.deg2rad(spec.elevations[i % len(spec.elevations)])
        eye = center + radius * np.array([
            np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(look_at(eye, center, up=(0, 0, 1),
                            width=spec.image_size, height=spec.image_size,
                            fov_deg=spec.fov_deg))
    return cams


def render_supervision(model, gt_ids, cameras, background=(0, 0, 0)):
    """Self-consistent images and label maps from the engine itself.

    Labels: composite one-hot ground-truth id features, take the argmax
    channel, background where alpha < 0.5. Images are quantized to 8-bit
    like the files the trainer will read.
    """
    ids = np.asarray(gt_ids)
    used = np.unique(ids)
    onehot = np.zeros((len(model), used.size))
    for col, uid in enumerate(used):
        onehot[ids == uid, col] = 1.0
    options = RenderOptions(background=tuple(background))
    images, labels = [], []
    for cam in cameras:
        out = render(model, cam, features=onehot, options=options)
        img = np.clip(np.rint(out.color * 255.0), 0, 255) / 255.0
        win = out.identity.argmax(axis=-1)
        lab = used[win].astype(np.uint8)
        lab[out.alpha < 0.5] = 0
        images.append(img)
        labels.append(lab)
    return images, labels


def generate_scene(spec):
    """Build the full synthetic scene per the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    model, gt_ids = build_gt_model(spec, rng)
    lo, hi = model.bounds()
    margin = 0.1 * max(float(np.linalg.norm(hi - lo)), 1e-6)
    center = 0.5 * (lo + hi)
    radius = spec.camera_radius_factor * max(
        float(np.linalg.norm(hi - lo)) * 0.5, 1e-6)
    cameras = ring_cameras(center, radius, spec)
    images, labels = render_supervision(model, gt_ids, cameras)
    return SynthScene(model=model, gt_ids=gt_ids, cameras=cameras,
                      images=images, labels=labels,
                      bounds_min=lo - margin, bounds_max=hi + margin,
                      spec=spec)


def region_contains(region, points):
    """Boolean membership of (N, 3) points in a region dict.

    Regions: {"type": "sphere", center, radius},
    {"type": "box", min, max},
    {"type": "halfspace", point, normal} (normal side is inside).
    """
    p = np.asarray(points, dtype=np.float64)
    kind = region.get("type")
    if kind == "sphere":
        c = np.asarray(region["center"], dtype=np.float64)
        r = float(region["radius"])
        if r <= 0:
            return np.zeros(len(p), dtype=bool)
        return np.linalg.norm(p - c, axis=1) <= r
    if kind == "box":
        lo = np.asarray(region["min"], dtype=np.float64)
        hi = np.asarray(region["max"], dtype=np.float64)
        if np.any(hi <= lo):
            return np.zeros(len(p), dtype=bool)
        return np.all((p >= lo) & (p <= hi), axis=1)
    if kind == "halfspace":
        pt = np.asarray(region["point"], dtype=np.float64)
        nrm = np.asarray(region["normal"], dtype=np.float64)
        return (p - pt) @ nrm > 0
    raise ValueError(f"unknown region type {kind!r}")


def _camera_sees_region(camera, depth_map, alpha_map, probe_points, tol=0.05):
    """Would this camera observe any probe point unoccluded?

    A probe is visible when it projects into the image in front of the
    camera and the first surface along its pixel ray is not strictly
    nearer than the probe.
    """
    px, z = camera.project(probe_points)
    infront = z > 0
    inside = (infront & (px[:, 0] >= 0) & (px[:, 0] < camera.width)
              & (px[:, 1] >= 0) & (px[:, 1] < camera.height))
    if not inside.any():
        return False
    cols = np.clip(px[inside, 0].astype(int), 0, camera.width - 1)
    rows = np.clip(px[inside, 1].astype(int), 0, camera.height - 1)
    depth = depth_map[rows, cols]
    alpha = alpha_map[rows, cols]
    zz = z[inside]
    occluded = (alpha >= 0.5) & (depth < zz * (1.0 - tol))
    return bool(np.any(~occluded))


def plant_hole(scene, region):
    """Remove a surface region and every camera that could see it.

    Splats inside the region are deleted; cameras with an unoccluded
    view of any removed splat center are dropped; the supervision is
    re-rendered from the reduced model. The removed splats stay on the
    scene for later comparison. region None (or zero volume) is a no-op.
    """
    if region is None or region_is_degenerate(region):
        return scene
    inside = region_contains(region, scene.model.centers)
    if not inside.any():
        raise ValueError("region contains no splats")
    kept_model = scene.model.select(~inside)
    removed_model = scene.model.select(inside)
    probe = removed_model.centers.astype(np.float64)

    options = RenderOptions()
    keep_cams, keep_imgs, keep_labs = [], [], []
    for cam in scene.cameras:
        out = render(kept_model, cam, options=options)
        if not _camera_sees_region(cam, out.depth, out.alpha, probe):
            keep_cams.append(cam)
    if not keep_cams:
        raise ValueError("hole removes every camera; shrink the region")
    gt_ids = scene.gt_ids[~inside]
    images, labels = render_supervision(kept_model, gt_ids, keep_cams)
    return SynthScene(model=kept_model, gt_ids=gt_ids, cameras=keep_cams,
                      images=images, labels=labels,
                      bounds_min=scene.bounds_min, bounds_max=scene.bounds_max,
                      spec=scene.spec, hole=region,
                      removed=removed_model,
                      removed_ids=scene.gt_ids[inside])


def region_is_degenerate(region):
    kind = region.get("type")
    if kind == "sphere":
        return float(region["radius"]) <= 0
    if kind == "box":
        lo = np.asarray(region["min"], dtype=np.float64)
        hi = np.asarray(region["max"], dtype=np.float64)
        return bool(np.any(hi <= lo))
    return False


def write_scene(scene, out_dir):
    """Write a scene directory: manifest, rasters, init points, gt data."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    views = []
    for i, cam in enumerate(scene.cameras):
        img_rel = f"images/view_{i:03d}.png"
        lab_rel = f"labels/view_{i:03d}.png"
        save_image(out / img_rel, scene.images[i])
        save_label_map(out / lab_rel, scene.labels[i])
        views.append(SceneView(image=img_rel, camera=cam, labels=lab_rel))
    colors = np.clip(scene.model.sh[:, 0, :] * 0.28209479177387814 + 0.5, 0, 1)
    save_points(out / "points.ply", scene.model.centers, colors)
    manifest = SceneManifest(views=views, bounds_min=scene.bounds_min,
                             bounds_max=scene.bounds_max, base_dir=out,
                             points="points.ply")
    save_manifest(manifest, out / "manifest.json")
    save_checkpoint(scene.model, SegHead.zeros(), out / "gt" / "model.ply")
    (out / "gt" / "ids.json").write_text(
        json.dumps([int(i) for i in scene.gt_ids]))
    meta = {}
    if scene.hole is not None:
        meta["hole"] = {k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v)
                        for k, v in scene.hole.items()}
        save_checkpoint(scene.removed, SegHead.zeros(),
                        out / "gt" / "removed.ply")
        (out / "gt" / "removed_ids.json").write_text(
            json.dumps([int(i) for i in scene.removed_ids]))
    if meta:
        (out / "gt" / "meta.json").write_text(json.dumps(meta))
    return manifest


def analytic_sphere_mask(camera, center, radius):
    """Exact visibility mask of a sphere: ray-sphere intersection test."""
    dirs = camera.ray_directions().reshape(-1, 3)
    o = camera.center - np.asarray(center, dtype=np.float64)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ o
    c = o @ o - radius * radius
    disc = b * b - 4.0 * a * c
    sel = np.flatnonzero(disc >= 0)
    t_far = (-b[sel] + np.sqrt(disc[sel])) / (2.0 * a[sel])
    hit = np.zeros(dirs.shape[0], dtype=bool)
    hit[sel] = t_far > 0  # sphere at least partly in front
    return hit.reshape(camera.height, camera.width)


def default_three_object_spec(seed=0, n_views=24, image_size=64):
    """The standard 3-object segmentation testbed.

    All objects float apart from each other so that, with rings of
    cameras both above and below, every part of every surface is seen
    from somewhere.
    """
    return SynthSpec(objects=[
        SynthObject(shape="sphere", object_id=7, count=550,
                    color=(0.85, 0.3, 0.25), center=(-0.9, -0.5, 0.35),
                    radius=0.55),
        SynthObject(shape="box", object_id=23, count=900,
                    color=(0.25, 0.55, 0.85), center=(0.9, 0.45, -0.15),
                    half_sizes=(0.45, 0.38, 0.4)),
        SynthObject(shape="plane", object_id=101, count=700,
                    color=(0.4, 0.75, 0.35), center=(0.0, 0.1, -0.5),
                    normal=(0.25, -0.2, 0.95), extents=(1.25, 1.05)),
    ], n_views=n_views, image_size=image_size,
        camera_radius_factor=2.1, overlap=1.4, seed=seed)
