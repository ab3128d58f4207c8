"""Training loop: render, loss, analytic backward, Adam, densification."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .backward import render_backward
from .errors import SceneFormatError, TrainingDiverged
from .model import SplatModel, model_from_points, random_model
from .optim import DensifyConfig, LearningRates, OptimState, adam_step, densify_and_prune
from .render import RenderOptions, render
from .seghead import LossWeights, SegHead, total_loss

GEOMETRY_GROUPS = ("centers", "quats", "log_scales", "opacity_logits", "sh")


@dataclass
class TrainConfig:
    iterations: int = 30000
    seed: int = 0
    deterministic: bool = True
    sh_degree: int = 3
    init_splats: int = 2000
    freeze_geometry: bool = False
    # loss
    lambda_oe: float = 1.0
    lambda_cs: float = 1.0
    sample_count_m: int = 1000
    neighbor_count_n: int = 5
    # the printed smoothness formula is a raw mean cosine whose descent
    # would repel neighbors; "one_minus" is the corrected default
    lcs_convention: str = "one_minus"
    # learning rates
    lr_center: float = 1.6e-4
    lr_center_final_factor: float = 0.01
    lr_rotation: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_identity: float = 0.0025
    lr_head: float = 0.0005
    # densification
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15000
    densify_grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    percent_dense: float = 0.01
    # rendering
    background: tuple = (0.0, 0.0, 0.0)

    @staticmethod
    def from_dict(data, source="config"):
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SceneFormatError(
                f"{source} has unknown keys: {', '.join(unknown)}")
        cfg = TrainConfig(**data)
        if cfg.iterations < 0:
            raise SceneFormatError("iterations must be >= 0")
        if cfg.lcs_convention not in ("one_minus", "raw"):
            raise SceneFormatError(
                f"lcs_convention must be 'one_minus' or 'raw', "
                f"got {cfg.lcs_convention!r}")
        if isinstance(cfg.background, list):
            cfg.background = tuple(cfg.background)
        return cfg

    @staticmethod
    def from_file(path):
        path = Path(path)
        if not path.exists():
            raise SceneFormatError(f"config not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"config is not valid JSON: {e}") from e
        return TrainConfig.from_dict(data, source=str(path))

    def learning_rates(self):
        return LearningRates(
            center=self.lr_center,
            center_final_factor=self.lr_center_final_factor,
            rotation=self.lr_rotation, log_scales=self.lr_log_scales,
            opacity=self.lr_opacity, sh=self.lr_sh,
            identity=self.lr_identity, head=self.lr_head)

    def loss_weights(self):
        return LossWeights(lambda_oe=self.lambda_oe, lambda_cs=self.lambda_cs,
                           sample_count_m=self.sample_count_m,
                           neighbor_count_n=self.neighbor_count_n,
                           lcs_convention=self.lcs_convention)

    def densify_config(self):
        return DensifyConfig(
            grad_threshold=self.densify_grad_threshold,
            min_opacity=self.min_opacity,
            interval=self.densify_interval,
            start_iteration=self.densify_start,
            stop_iteration=self.densify_stop,
            percent_dense=self.percent_dense)


def init_model(manifest, config, rng):
    """Starting model: manifest point cloud if present, else random."""
    pts = manifest.load_points()
    if pts is not None:
        points, colors = pts
        return model_from_points(points, rng, colors=colors,
                                 sh_degree=config.sh_degree, dtype=np.float64)
    lo, hi = manifest.bounds_min, manifest.bounds_max
    model = random_model(config.init_splats, rng, sh_degree=config.sh_degree)
    span = np.maximum(np.ptp(model.centers, axis=0), 1e-9)
    model.centers = lo + (model.centers - model.centers.min(axis=0)) / span * (hi - lo)
    diag = float(np.linalg.norm(hi - lo))
    model.log_scales[:] = np.log(max(diag, 1e-3) * 0.5 / np.sqrt(config.init_splats))
    return model


@dataclass
class TrainState:
    """Bundles everything train() threads through its loop."""
    model: SplatModel
    head: SegHead
    optim: OptimState
    rng: np.random.Generator
    iteration: int = 0
    log_rows: list = field(default_factory=list)


def write_loss_log(rows, path):
    lines = ["iteration,L_gs,L_oe,L_cs,total"]
    lines += [f"{it},{gs:.8f},{oe:.8f},{cs:.8f},{tot:.8f}"
              for it, gs, oe, cs, tot in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def train(manifest, config, *, model=None, head=None, log_path=None,
          checkpoint_on_divergence=None, callback=None):
    """Optimize a splat model and classifier head against a scene.

    Views are sampled uniformly without replacement per epoch. Returns
    (model, head, log_rows) with one log row per iteration. On a
    non-finite loss the current state is dumped to
    `checkpoint_on_divergence` (if given) before raising.
    """
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_model(manifest, config, rng)
    else:
        model = model.copy()
    if model.dtype != np.float64:
        model = model.astype(np.float64)
    head = SegHead.zeros() if head is None else head.copy()

    n_views = len(manifest.views)
    images = [manifest.load_image(i) for i in range(n_views)]
    labels = [manifest.load_labels(i) for i in range(n_views)]
    cameras = manifest.cameras

    lrs = config.learning_rates()
    weights = config.loss_weights()
    dens_cfg = config.densify_config()
    options = RenderOptions(background=tuple(config.background))
    extent = float(np.linalg.norm(manifest.bounds_max - manifest.bounds_min))
    state = OptimState.for_model(model, head)
    frozen = GEOMETRY_GROUPS if config.freeze_geometry else ()

    grad_accum = np.zeros(len(model))
    grad_count = np.zeros(len(model), dtype=np.int64)
    log_rows = []
    view_order = None

    for it in range(1, config.iterations + 1):
        k = (it - 1) % n_views
        if k == 0:
            view_order = rng.permutation(n_views)
        vi = int(view_order[k])

        out = render(model, cameras[vi], options=options, want_cache=True)
        value, comps, grads = total_loss(
            out, images[vi], labels[vi], model, head, weights, rng)
        if not np.isfinite(value):
            if checkpoint_on_divergence is not None:
                from .sceneio import save_checkpoint
                save_checkpoint(model, head, checkpoint_on_divergence)
            raise TrainingDiverged(
                f"loss became non-finite at iteration {it} "
                f"(components: {comps})")

        buf = render_backward(out.cache, d_color=grads["d_color"],
                              d_identity=grads["d_identity_field"])
        buf.identities += grads["d_identities"]

        if not config.freeze_geometry:
            norms = np.linalg.norm(buf.centers, axis=1)
            grad_accum += norms
            grad_count += norms > 0

        adam_step(model, head, buf, grads["d_weights"], grads["d_biases"],
                  state, lrs,
                  center_lr=lrs.center_at(it, config.iterations),
                  frozen_groups=frozen)

        log_rows.append((it, comps["l_gs"], comps["l_oe"], comps["l_cs"],
                         comps["total"]))
        if callback is not None:
            callback(it, model, head, comps)

        densify_due = (not config.freeze_geometry
                       and dens_cfg.start_iteration <= it <= dens_cfg.stop_iteration
                       and it % dens_cfg.interval == 0)
        if densify_due:
            model, state, report = densify_and_prune(
                model, state, grad_accum, grad_count, dens_cfg, extent, rng)
            grad_accum = np.zeros(len(model))
            grad_count = np.zeros(len(model), dtype=np.int64)

    if log_path is not None:
        write_loss_log(log_rows, log_path)
    return model, head, log_rows
