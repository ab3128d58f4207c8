"""Identity classification head, segmentation losses, target extraction.

An 8-dim identity vector (per splat, or alpha-composited per pixel) is
mapped through a single linear layer to 256 class logits and a softmax.
Class 0 is reserved for background / no supervision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ExtractionError
from .model import IDENTITY_DIM, NUM_CLASSES
from .render import RenderOptions, render


@dataclass
class SegHead:
    weights: np.ndarray  # (256, 8)
    biases: np.ndarray   # (256,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.shape != (NUM_CLASSES, IDENTITY_DIM):
            raise ValueError(
                f"head weights must be {(NUM_CLASSES, IDENTITY_DIM)}, "
                f"got {self.weights.shape}")
        if self.biases.shape != (NUM_CLASSES,):
            raise ValueError(f"head biases must be ({NUM_CLASSES},)")

    @staticmethod
    def zeros():
        return SegHead(np.zeros((NUM_CLASSES, IDENTITY_DIM)),
                       np.zeros(NUM_CLASSES))

    def copy(self):
        return SegHead(self.weights.copy(), self.biases.copy())


@dataclass
class LossWeights:
    lambda_oe: float = 1.0
    lambda_cs: float = 1.0
    sample_count_m: int = 1000
    neighbor_count_n: int = 5
    # "one_minus": 1 - mean cosine (descent attracts neighbors, default);
    # "raw": plain mean cosine as sometimes written
    lcs_convention: str = "one_minus"

    def __post_init__(self):
        if self.lambda_oe < 0 or self.lambda_cs < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.sample_count_m < 1 or self.neighbor_count_n < 1:
            raise ValueError("sample and neighbor counts must be positive")
        if self.lcs_convention not in ("one_minus", "raw"):
            raise ValueError(f"unknown lcs_convention {self.lcs_convention!r}")


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(vectors, head):
    """Softmax class probabilities for (..., 8) identity vectors."""
    v = np.asarray(vectors, dtype=np.float64)
    logits = v @ head.weights.T + head.biases
    return _softmax(logits)


def loss_oe(identity_field, label_map, head):
    """Cross-entropy between classified pixels and the label map.

    identity_field: (H, W, 8) rendered identity; label_map: (H, W)
    integer IDs, 0 = unsupervised. Returns (value, cache) where the
    cache feeds loss_oe_backward.
    """
    labels = np.asarray(label_map)
    sup = labels > 0
    n_sup = int(sup.sum())
    if n_sup == 0:
        warnings.warn("label map has no supervised pixels; L_oe = 0")
        return 0.0, {"n_sup": 0, "shape": identity_field.shape}
    vecs = identity_field[sup]            # (S, 8)
    lab = labels[sup].astype(np.int64)    # (S,)
    logits = vecs @ head.weights.T + head.biases
    zmax = logits.max(axis=1, keepdims=True)
    logz = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    value = float(np.mean(logz - logits[np.arange(n_sup), lab]))
    cache = {"n_sup": n_sup, "sup": sup, "vecs": vecs, "lab": lab,
             "probs": _softmax(logits), "shape": identity_field.shape,
             "head": head}
    return value, cache


def loss_oe_backward(cache, upstream=1.0):
    """Gradients (d_identity_field, d_weights, d_biases)."""
    shape = cache["shape"]
    d_field = np.zeros(shape)
    d_w = np.zeros((NUM_CLASSES, IDENTITY_DIM))
    d_b = np.zeros(NUM_CLASSES)
    if cache["n_sup"] == 0:
        return d_field, d_w, d_b
    probs, lab = cache["probs"], cache["lab"]
    d_logits = probs.copy()
    d_logits[np.arange(lab.size), lab] -= 1.0
    d_logits *= upstream / cache["n_sup"]
    head = cache["head"]
    d_field[cache["sup"]] = d_logits @ head.weights
    d_w += d_logits.T @ cache["vecs"]
    d_b += d_logits.sum(axis=0)
    return d_field, d_w, d_b


def knn_neighbors(model, query, n):
    """Indices of the n nearest splat centers to `query`, excluding it.

    Ties are broken by index. `query` may be an int or an index array.
    """
    count = len(model)
    scalar = np.isscalar(query)
    q = np.atleast_1d(np.asarray(query, dtype=np.int64))
    if n < 1 or n >= count:
        raise ValueError(f"n must be in [1, {count - 1}], got {n}")
    centers = model.centers.astype(np.float64)
    if count <= 1000:
        # brute force keeps tie-breaking by index trivially exact
        d = np.linalg.norm(centers[q][:, None, :] - centers[None, :, :], axis=2)
        d[np.arange(q.size), q] = np.inf
        idx = np.argsort(d, axis=1, kind="stable")[:, :n]
    else:
        tree = cKDTree(centers)
        k = min(n + 1, count)
        dist, idx_full = tree.query(centers[q], k=k)
        idx = np.empty((q.size, n), dtype=np.int64)
        for row in range(q.size):
            cand = [int(c) for c in idx_full[row] if c != q[row]][:n]
            if len(cand) < n:  # query duplicated in space; refill
                d = np.linalg.norm(centers - centers[q[row]], axis=1)
                d[q[row]] = np.inf
                cand = list(np.argsort(d, kind="stable")[:n])
            idx[row] = cand
        # kd-tree distance ties can come back in arbitrary order
        d = np.linalg.norm(centers[idx] - centers[q][:, None, :], axis=2)
        order = np.lexsort((idx, d), axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
    return idx[0] if scalar else idx


def loss_cs(model, head, sample_count_m, neighbor_count_n, rng,
            convention="one_minus"):
    """Spatial smoothness of classified identities.

    Samples m splats, finds each one's n nearest neighbors, and returns
    1 - mean cosine similarity between the softmax features of each
    sample and its neighbors ("raw" flips to plain mean cosine), plus
    gradients: (value, d_identities, d_weights, d_biases).
    """
    count = len(model)
    if count <= neighbor_count_n:
        raise ValueError(
            f"model has {count} splats; need more than {neighbor_count_n}")
    samples = rng.choice(count, size=sample_count_m, replace=True)
    neighbors = knn_neighbors(model, samples, neighbor_count_n)  # (m, n)

    involved = np.unique(np.concatenate([samples, neighbors.reshape(-1)]))
    pos = np.full(count, -1, dtype=np.int64)
    pos[involved] = np.arange(involved.size)
    feats = classify(model.identities[involved], head)   # (K, 256)
    norms = np.linalg.norm(feats, axis=1)

    fi = pos[samples]                       # (m,)
    fj = pos[neighbors]                     # (m, n)
    fa = feats[fi][:, None, :]              # (m, 1, 256)
    fb = feats[fj]                          # (m, n, 256)
    na = norms[fi][:, None]
    nb = norms[fj]
    dots = np.einsum("mnc,mnc->mn", np.broadcast_to(fa, fb.shape), fb)
    cos = dots / (na * nb)
    n_pairs = cos.size
    if convention == "one_minus":
        value = float(1.0 - cos.mean())
        up = -1.0 / n_pairs
    else:
        value = float(cos.mean())
        up = 1.0 / n_pairs

    # d cos/d fa = fb/(na nb) - cos fa/na^2
    g_a = up * (fb / (na * nb)[:, :, None]
                - cos[:, :, None] * fa / (na * na)[:, :, None])
    g_b = up * (np.broadcast_to(fa, fb.shape) / (na * nb)[:, :, None]
                - cos[:, :, None] * fb / (nb * nb)[:, :, None])
    d_feats = np.zeros_like(feats)
    np.add.at(d_feats, fi, g_a.sum(axis=1))
    np.add.at(d_feats, fj.reshape(-1), g_b.reshape(-1, NUM_CLASSES))

    # through softmax: d_logits = f * (d_feats - (d_feats . f))
    inner = np.einsum("kc,kc->k", d_feats, feats)
    d_logits = feats * (d_feats - inner[:, None])
    d_ident = np.zeros((count, IDENTITY_DIM))
    d_ident[involved] = d_logits @ head.weights
    d_w = d_logits.T @ model.identities[involved].astype(np.float64)
    d_b = d_logits.sum(axis=0)
    return value, d_ident, d_w, d_b


def total_loss(render_out, target_image, label_map, model, head, weights,
               rng):
    """Training loss: photometric + weighted segmentation terms.

    Returns (value, components, grads) where grads bundles everything
    the optimizer step needs: d_color, d_identity_field, d_identities
    (direct, from L_cs), d_weights, d_biases.
    """
    from .losses import l_gs

    gs_val, d_color, gs_parts = l_gs(render_out.color, target_image)
    components = {"l_gs": gs_val, **gs_parts}

    d_field = np.zeros_like(render_out.identity)
    d_ident = np.zeros((len(model), IDENTITY_DIM))
    d_w = np.zeros((NUM_CLASSES, IDENTITY_DIM))
    d_b = np.zeros(NUM_CLASSES)

    if weights.lambda_oe > 0 and label_map is not None:
        oe_val, cache = loss_oe(render_out.identity, label_map, head)
        df, dw, db = loss_oe_backward(cache, upstream=weights.lambda_oe)
        d_field += df
        d_w += dw
        d_b += db
    else:
        oe_val = 0.0
    components["l_oe"] = oe_val

    if weights.lambda_cs > 0 and len(model) > weights.neighbor_count_n:
        cs_val, di, dw, db = loss_cs(model, head, weights.sample_count_m,
                                     weights.neighbor_count_n, rng,
                                     convention=weights.lcs_convention)
        d_ident += weights.lambda_cs * di
        d_w += weights.lambda_cs * dw
        d_b += weights.lambda_cs * db
    else:
        cs_val = 0.0
    components["l_cs"] = cs_val

    value = gs_val + weights.lambda_oe * oe_val + weights.lambda_cs * cs_val
    components["total"] = value
    grads = {"d_color": d_color, "d_identity_field": d_field,
             "d_identities": d_ident, "d_weights": d_w, "d_biases": d_b}
    return value, components, grads


def extract_target(model, head, target_id, p_ex=0.95):
    """Split the model into (target, remainder) by classified confidence.

    A splat belongs to the target iff its softmax probability for
    target_id is at least p_ex. Order is preserved in both halves.
    """
    if not 1 <= target_id <= NUM_CLASSES - 1:
        raise ExtractionError(f"target id must be in [1, 255], got {target_id}")
    probs = classify(model.identities, head)
    conf = probs[:, target_id]
    mask = conf >= p_ex
    if not mask.any():
        best = float(conf.max()) if len(model) else 0.0
        present = np.argsort(probs.max(axis=0))[::-1][:8] if len(model) else []
        ids = [int(i) for i in present if i > 0][:5]
        raise ExtractionError(
            f"no splat reaches confidence {p_ex} for id {target_id} "
            f"(max observed {best:.4f}; strongest ids: {ids})")
    return model.select(mask), model.select(~mask)


def render_target_mask(target_model, camera, options=None, threshold=0.5):
    """Binary visibility mask of a model: alpha >= threshold."""
    out = render(target_model, camera, options=options)
    return out.alpha >= threshold


def render_id_map(model, camera, head, options=None, threshold=0.5):
    """Per-pixel argmax class of the rendered identity field.

    Pixels with alpha below the threshold are background (0).
    """
    out = render(model, camera, options=options)
    probs = classify(out.identity, head)
    ids = probs.argmax(axis=-1).astype(np.uint8)
    ids[out.alpha < threshold] = 0
    return ids
