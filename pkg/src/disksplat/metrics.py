"""Segmentation and geometry metrics.

Segmentation quality is intersection-over-union per object ID, averaged
over views and then IDs; the boundary variant restricts scoring to a
band around either mask's boundary. Geometry quality is the
precision/recall F-score between point sets at a distance threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DiskSplatError


@dataclass
class SegScore:
    per_id_iou: dict
    per_id_biou: dict = field(default_factory=dict)

    @property
    def miou(self):
        vals = list(self.per_id_iou.values())
        return float(np.mean(vals)) if vals else 0.0

    @property
    def mbiou(self):
        vals = list(self.per_id_biou.values())
        return float(np.mean(vals)) if vals else 0.0


@dataclass
class GeomScore:
    precision: float
    recall: float
    f1: float
    tau_d: float


def _as_mask_lists(pred, gt):
    pred = [np.asarray(p) for p in pred]
    gt = [np.asarray(g) for g in gt]
    if len(pred) != len(gt):
        raise DiskSplatError("pred and gt view counts differ")
    for p, g in zip(pred, gt):
        if p.shape != g.shape:
            raise DiskSplatError(
                f"mask resolution mismatch: {p.shape} vs {g.shape}")
    return pred, gt


def _collect_ids(pred, gt, ids):
    if ids is not None:
        return [int(i) for i in ids]
    found = set()
    for m in list(pred) + list(gt):
        found.update(int(v) for v in np.unique(m))
    found.discard(0)
    return sorted(found)


def miou(pred, gt, ids=None):
    """Mean IoU of ID maps over views, then over IDs.

    pred, gt: equal-length lists of integer label maps; 0 is background.
    IDs absent from both maps of a view are skipped for that view; IDs
    evaluable in no view are dropped. Raises when nothing is evaluable.
    """
    pred, gt = _as_mask_lists(pred, gt)
    ids = _collect_ids(pred, gt, ids)
    per_id = {}
    for oid in ids:
        vals = []
        for p, g in zip(pred, gt):
            pm = p == oid
            gm = g == oid
            union = np.logical_or(pm, gm).sum()
            if union == 0:
                continue
            vals.append(np.logical_and(pm, gm).sum() / union)
        if vals:
            per_id[oid] = float(np.mean(vals))
    if not per_id:
        raise DiskSplatError("no evaluable IDs in any view")
    return SegScore(per_id_iou=per_id)


def boundary_band(mask, radius):
    """Mask pixels within `radius` (city block) of the mask's boundary.

    Erosion difference: the mask minus its r-fold erosion. The image
    border is not a boundary; only mask/background transitions count.
    """
    mask = np.asarray(mask, dtype=bool)
    if radius < 1:
        radius = 1
    st = ndimage.generate_binary_structure(2, 1)
    ero = ndimage.binary_erosion(mask, st, iterations=radius,
                                 border_value=1)
    return mask & ~ero


def mbiou(pred, gt, ids=None, band_frac=0.02):
    """Boundary-band mean IoU.

    Scores only pixels within band_frac x image diagonal of either
    mask's boundary (union of the two erosion-difference bands), so
    disagreements deep inside a mask do not count against it.
    """
    pred, gt = _as_mask_lists(pred, gt)
    ids = _collect_ids(pred, gt, ids)
    per_id = {}
    per_id_plain = {}
    for oid in ids:
        vals, plain = [], []
        for p, g in zip(pred, gt):
            pm = p == oid
            gm = g == oid
            union = np.logical_or(pm, gm).sum()
            if union == 0:
                continue
            plain.append(np.logical_and(pm, gm).sum() / union)
            diag = float(np.hypot(*p.shape))
            radius = max(1, int(round(band_frac * diag)))
            band = boundary_band(pm, radius) | boundary_band(gm, radius)
            bu = (np.logical_or(pm, gm) & band).sum()
            if bu == 0:
                vals.append(1.0)  # no boundary pixels at all
                continue
            bi = (np.logical_and(pm, gm) & band).sum()
            vals.append(bi / bu)
        if vals:
            per_id[oid] = float(np.mean(vals))
            per_id_plain[oid] = float(np.mean(plain))
    if not per_id:
        raise DiskSplatError("no evaluable IDs in any view")
    return SegScore(per_id_iou=per_id_plain, per_id_biou=per_id)


def _fraction_within(src, dst, tau):
    """Fraction of src points with a dst point within tau."""
    if len(dst) < 1000 and len(src) < 1000:
        d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        return float((d2.min(axis=1) <= tau * tau).mean())
    tree = cKDTree(dst)
    dist, _ = tree.query(src, k=1)
    return float((dist <= tau).mean())


def f1_geometry(pred, gt, tau, samples=100_000, rng=None):
    """Tanks-and-Temples style F-score between surfaces.

    pred and gt may be point arrays or triangle meshes (meshes are
    sampled uniformly by area). precision = fraction of pred points
    within tau of gt; recall the reverse; F1 their harmonic mean.
    """
    if tau <= 0:
        raise DiskSplatError("tau must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    pts = []
    for obj in (pred, gt):
        if hasattr(obj, "sample_surface"):
            pts.append(obj.sample_surface(samples, rng))
        else:
            pts.append(np.asarray(obj, dtype=np.float64).reshape(-1, 3))
    p, g = pts
    if len(p) == 0 or len(g) == 0:
        raise DiskSplatError("point sets must be nonempty")
    precision = _fraction_within(p, g, tau)
    recall = _fraction_within(g, p, tau)
    f1 = 2 * precision * recall / (precision + recall) \
        if precision + recall > 0 else 0.0
    return GeomScore(precision=precision, recall=recall, f1=f1,
                     tau_d=float(tau))
