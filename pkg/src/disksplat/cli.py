"""Command-line pipeline: synth, train, render, extract, replenish, mesh, eval.

Stage boundaries are files on disk (scene directories, checkpoints,
meshes), so every subcommand can be rerun from its inputs alone. Exit
code 0 means the command completed; failures print one diagnostic line
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import DiskSplatError, ExtractionError, SceneFormatError
from .metrics import f1_geometry, mbiou, miou
from .render import RenderOptions, render
from .replenish import InpaintClient, ReplenishConfig, replenish_loop
from .sceneio import (export_mesh, load_checkpoint, load_manifest, load_mesh,
                      save_checkpoint, save_image, save_label_map)
from .seghead import classify, extract_target, render_id_map
from .synth import (default_three_object_spec, generate_scene, plant_hole,
                    write_scene)
from .training import TrainConfig, train, write_loss_log
from .tsdf import MeshingConfig, extract_mesh

ENV_INPAINT_URL = "OMEGAS_INPAINT_URL"


class RunConfig:
    """Layered command configuration: defaults <- config file <- flags.

    Holds the merged dict; `build` materializes a module config whose
    constructor rejects unknown keys, so every consumed key is checked.
    """

    def __init__(self, config_path=None, overrides=None):
        self.data = {}
        self.source = "config"
        if config_path is not None:
            p = Path(config_path)
            if not p.exists():
                raise SceneFormatError(f"config not found: {p}")
            try:
                self.data = json.loads(p.read_text())
            except json.JSONDecodeError as e:
                raise SceneFormatError(f"config is not valid JSON: {e}") from e
            if not isinstance(self.data, dict):
                raise SceneFormatError("config must be a JSON object")
            self.source = str(p)
        for key, value in (overrides or {}).items():
            if value is not None:
                self.data[key] = value

    def build(self, from_dict):
        return from_dict(self.data, source=self.source)


def _dataclass_from_dict(cls):
    """from_dict adapter for config dataclasses without their own."""
    def build(data, source="config"):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SceneFormatError(
                f"{source} has unknown keys: {', '.join(unknown)}")
        return cls(**data)
    return build


def _manifest_path(scene):
    p = Path(scene)
    return p if p.suffix == ".json" else p / "manifest.json"


# ------------------------------------------------------------- subcommands


@dataclass
class SynthParams:
    seed: int = 0
    n_views: int = 24
    image_size: int = 64
    hole: dict | None = None


def cmd_synth(args):
    cfg = RunConfig(args.config, {
        "seed": args.seed, "n_views": args.views,
        "image_size": args.image_size,
    }).build(_dataclass_from_dict(SynthParams))
    spec = default_three_object_spec(seed=cfg.seed, n_views=cfg.n_views,
                                     image_size=cfg.image_size)
    scene = generate_scene(spec)
    if cfg.hole is not None:
        scene = plant_hole(scene, cfg.hole)
    write_scene(scene, args.out)
    print(f"synth: {len(scene.model)} splats, {len(scene.cameras)} views "
          f"-> {args.out}")
    return 0


def cmd_train(args):
    manifest = load_manifest(_manifest_path(args.scene))
    cfg = RunConfig(args.config, {
        "iterations": args.iterations, "seed": args.seed,
        "deterministic": True if args.deterministic else None,
    }).build(TrainConfig.from_dict)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model, head, rows = train(manifest, cfg,
                              checkpoint_on_divergence=out.with_suffix(
                                  ".diverged.ply"))
    save_checkpoint(model, head, out)
    if args.log:
        write_loss_log(rows, args.log)
    final = rows[-1][4] if rows else float("nan")
    print(f"train: {cfg.iterations} iterations, {len(model)} splats, "
          f"final loss {final:.6f} -> {out}")
    return 0


def cmd_render(args):
    model, head = load_checkpoint(args.checkpoint)
    manifest = load_manifest(_manifest_path(args.scene))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    options = RenderOptions()
    for i, cam in enumerate(manifest.cameras):
        res = render(model, cam, options=options)
        save_image(out / f"view_{i:03d}.png", res.color)
        if args.id_maps:
            ids = render_id_map(model, cam, head, options=options)
            save_label_map(out / f"ids_{i:03d}.png", ids)
    print(f"render: {len(manifest.cameras)} views -> {out}")
    return 0


def cmd_extract(args):
    model, head = load_checkpoint(args.checkpoint)
    if len(model) == 0:
        raise ExtractionError("checkpoint has no splats")
    probs = classify(model.identities, head)
    present = sorted(int(i) for i in np.unique(probs.argmax(axis=1)) if i > 0)
    if args.target_id not in present:
        raise ExtractionError(
            f"unknown target id {args.target_id}; "
            f"available ids: {present or 'none'}")
    target, remainder = extract_target(model, head, args.target_id,
                                       p_ex=args.p_ex)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(target, head, out / "target.ply")
    save_checkpoint(remainder, head, out / "remainder.ply")
    print(f"extract: id {args.target_id} at p_ex {args.p_ex}: "
          f"{len(target)} target, {len(remainder)} remainder -> {out}")
    return 0


def cmd_replenish(args):
    target, head = load_checkpoint(args.checkpoint)
    scene = load_manifest(_manifest_path(args.scene)) if args.scene else None
    overrides = {
        "mask_mode": args.mask_mode, "seed": args.seed,
        "iterations": args.iterations,
        "max_concurrent": 1 if args.deterministic else None,
    }
    cfg = RunConfig(args.config, overrides).build(ReplenishConfig.from_dict)
    url = args.inpaint_url or os.environ.get(ENV_INPAINT_URL)
    if url is None:
        raise DiskSplatError(
            f"no inpainting service: pass --inpaint-url or set "
            f"{ENV_INPAINT_URL}")
    client = InpaintClient(url)
    result = replenish_loop(scene, target, head, cfg, client=client)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, result.head, out)
    print(f"replenish: {result.requests_issued} inpaint requests "
          f"({result.requests_skipped} skipped), "
          f"{len(target)} -> {len(result.model)} splats -> {out}")
    return 0


def cmd_mesh(args):
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(_manifest_path(args.scene))
    cfg = RunConfig(args.config, {
        "voxel_size": args.voxel_size,
    }).build(_dataclass_from_dict(MeshingConfig))
    mesh = extract_mesh(model, manifest.cameras, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_mesh(mesh, out)
    print(f"mesh: {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles -> {out}")
    return 0


def cmd_eval(args):
    report = {}
    if args.checkpoint and args.scene:
        model, head = load_checkpoint(args.checkpoint)
        manifest = load_manifest(_manifest_path(args.scene))
        pred, gt = [], []
        for i, cam in enumerate(manifest.cameras):
            labels = manifest.load_labels(i)
            if labels is None:
                continue
            pred.append(render_id_map(model, cam, head))
            gt.append(labels)
        if not gt:
            raise SceneFormatError("scene has no label maps to score against")
        report["miou"] = miou(pred, gt).miou
        report["mbiou"] = mbiou(pred, gt).mbiou
    if args.mesh and args.gt_mesh:
        score = f1_geometry(load_mesh(args.mesh), load_mesh(args.gt_mesh),
                            tau=args.tau, rng=np.random.default_rng(0))
        report.update(precision=score.precision, recall=score.recall,
                      f1=score.f1, tau_d=score.tau_d)
    if not report:
        raise DiskSplatError(
            "nothing to evaluate: pass --checkpoint with --scene, "
            "or --mesh with --gt-mesh")
    text = json.dumps({k: round(float(v), 6) for k, v in report.items()},
                      indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# -------------------------------------------------------------- arg wiring


def build_parser():
    parser = argparse.ArgumentParser(
        prog="disksplat",
        description="Splat reconstruction, segmentation, and meshing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a model against a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render checkpoint at scene cameras")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--id-maps", action="store_true",
                   help="also write per-pixel object id maps")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract", help="split a checkpoint by object id")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-id", type=int, required=True)
    p.add_argument("--p-ex", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("replenish",
                       help="repair under-reconstructed target regions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--inpaint-url")
    p.add_argument("--mask-mode", choices=("residual", "coverage"))
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_replenish)

    p = sub.add_parser("mesh", help="fuse a checkpoint into a triangle mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--voxel-size", type=float)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="score segmentation or mesh geometry")
    p.add_argument("--checkpoint")
    p.add_argument("--scene")
    p.add_argument("--mesh")
    p.add_argument("--gt-mesh")
    p.add_argument("--tau", type=float, default=0.02)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DiskSplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
