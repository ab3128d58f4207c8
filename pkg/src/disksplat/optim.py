"""Adam optimization and adaptive density control for splat models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged
from .model import SplatModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

SPLAT_GROUPS = ("centers", "quats", "log_scales", "opacity_logits", "sh",
                "identities")


@dataclass
class LearningRates:
    center: float = 1.6e-4
    center_final_factor: float = 0.01  # exponential decay target over the run
    rotation: float = 1e-3
    log_scales: float = 5e-3
    opacity: float = 5e-2
    sh: float = 2.5e-3
    identity: float = 0.0025
    head: float = 0.0005

    def for_group(self, group):
        return {"centers": self.center, "quats": self.rotation,
                "log_scales": self.log_scales,
                "opacity_logits": self.opacity, "sh": self.sh,
                "identities": self.identity}[group]

    def center_at(self, iteration, max_iterations):
        """Exponential decay from `center` to `center * final_factor`."""
        if max_iterations <= 1:
            return self.center
        t = min(max(iteration / max_iterations, 0.0), 1.0)
        return self.center * (self.center_final_factor ** t)


@dataclass
class OptimState:
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v)

    @staticmethod
    def for_model(model, head):
        st = OptimState()
        for g in SPLAT_GROUPS:
            arr = getattr(model, g)
            st.moments[g] = (np.zeros(arr.shape), np.zeros(arr.shape))
        st.moments["head_w"] = (np.zeros(head.weights.shape),
                                np.zeros(head.weights.shape))
        st.moments["head_b"] = (np.zeros(head.biases.shape),
                                np.zeros(head.biases.shape))
        return st


def _adam_update(param, grad, m, v, lr, step):
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1 ** step)
    v_hat = v / (1.0 - ADAM_BETA2 ** step)
    param -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(param.dtype)
    return m, v


def adam_step(model, head, buf, d_head_w, d_head_b, state, lrs,
              center_lr=None, frozen_groups=()):
    """One Adam step over every parameter group, in place.

    buf: GradientBuffer for the splat parameters. center_lr overrides
    the center group's rate (scheduling). Groups named in frozen_groups
    are skipped entirely (their moments stay untouched).
    """
    for name, g in (("splat gradients", buf), ):
        if not g.finite():
            raise TrainingDiverged(f"non-finite values in {name} at step {state.step}")
    if not (np.all(np.isfinite(d_head_w)) and np.all(np.isfinite(d_head_b))):
        raise TrainingDiverged(f"non-finite head gradient at step {state.step}")

    state.step += 1
    t = state.step
    for group in SPLAT_GROUPS:
        if group in frozen_groups:
            continue
        lr = lrs.for_group(group)
        if group == "centers" and center_lr is not None:
            lr = center_lr
        param = getattr(model, group)
        grad = getattr(buf, group)
        m, v = state.moments[group]
        state.moments[group] = _adam_update(param, grad, m, v, lr, t)
    if "head" not in frozen_groups:
        m, v = state.moments["head_w"]
        state.moments["head_w"] = _adam_update(head.weights, d_head_w, m, v,
                                               lrs.head, t)
        m, v = state.moments["head_b"]
        state.moments["head_b"] = _adam_update(head.biases, d_head_b, m, v,
                                               lrs.head, t)
    model.renormalize_quats()


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    split_scale_factor: float = 1.6
    # splats larger than this fraction of the scene extent split, the
    # rest clone
    percent_dense: float = 0.01
    interval: int = 100
    start_iteration: int = 500
    stop_iteration: int = 15000


def densify_and_prune(model, state, grad_accum, grad_count, cfg, extent, rng):
    """Clone/split high-gradient splats and prune transparent ones.

    grad_accum: per-splat summed positional gradient norms since the
    last call; grad_count: how many of those iterations the splat was
    visible in. Children inherit the parent's identity verbatim and
    start with zero optimizer moments. Returns (model, state, report).
    """
    n = len(model)
    mean_grad = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    hot = mean_grad > cfg.grad_threshold
    scales = model.scales
    big = scales.max(axis=1) > cfg.percent_dense * extent
    split_mask = hot & big
    clone_mask = hot & ~big
    opaque = model.opacities >= cfg.min_opacity
    # parents that split are consumed by their children
    keep_mask = opaque & ~split_mask

    survivors = model.select(keep_mask)
    clones = model.select(clone_mask & keep_mask)

    parents = model.select(split_mask)
    children = None
    if len(parents) > 0:
        doubled = SplatModel.concatenate(parents, parents)
        doubled.log_scales = doubled.log_scales - np.log(cfg.split_scale_factor)
        from .model import quat_to_rotation, normalize_quaternions
        rot = quat_to_rotation(normalize_quaternions(doubled.quats.astype(np.float64)))
        s = np.exp(doubled.log_scales.astype(np.float64))
        uv = rng.normal(size=(len(doubled), 2))
        offset = (rot[:, :, 0] * (s[:, 0] * uv[:, 0])[:, None]
                  + rot[:, :, 1] * (s[:, 1] * uv[:, 1])[:, None])
        doubled.centers = (doubled.centers.astype(np.float64) + offset).astype(
            doubled.centers.dtype)
        children = doubled

    new_model = survivors
    for extra in (clones, children):
        if extra is not None and len(extra) > 0:
            new_model = SplatModel.concatenate(new_model, extra)

    # moments follow survivors; any new splat starts cold
    n_new = len(new_model)
    for group in SPLAT_GROUPS:
        m, v = state.moments[group]
        arr = getattr(new_model, group)
        nm = np.zeros(arr.shape)
        nv = np.zeros(arr.shape)
        nm[: keep_mask.sum()] = m[keep_mask]
        nv[: keep_mask.sum()] = v[keep_mask]
        state.moments[group] = (nm, nv)

    report = {"cloned": int((clone_mask & keep_mask).sum()),
              "split": int(split_mask.sum()),
              "pruned": int((~opaque & ~split_mask).sum()),
              "total": n_new}
    return new_model, state, report
