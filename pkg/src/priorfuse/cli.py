"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
Every subcommand accepts ``--config FILE``; explicit flags override it and it
overrides the built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import UsageError, resolve
from .dataio import (
    DatasetManifest,
    FrameRecord,
    load_dataset,
    load_depth_png,
    load_normal_png,
    save_depth_png,
    save_normal_png,
    write_dataset,
)
from .evalmetrics import evaluate
from .fusion import FusionConfig
from .geometry import CAMERA, InvalidInputError, NormalMap
from .isooctree import OctreeConfig
from .losses import LossSchedule, compute_losses
from .meshio import atomic_write_text, load_mesh, save_mesh
from .pipeline import MODERATE_NOISE, PipelineConfig, reconstruct, run_frames
from .priors import (
    AnrConfig,
    DncConfig,
    anr_filter_normals,
    depth_normals_knn,
    dnc_filter_depth,
    render_normal_from_depth,
)
from .synth import SCENES, NoiseModel, make_scene, render_scene

log = logging.getLogger("priorfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _box(s):
    parts = [float(x) for x in str(s).replace(" ", "").split(",")]
    if len(parts) != 6:
        raise argparse.ArgumentTypeError("expected six comma-separated numbers x0,y0,z0,x1,y1,z1")
    return (tuple(parts[:3]), tuple(parts[3:]))


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


# --- argument groups ---------------------------------------------------------------

def _common(p):
    p.add_argument("--config", default=None, help="JSON or key = value settings file")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--workers", type=int, default=1, help="threads for KNN queries and isofunction sampling")
    p.add_argument("-v", "--verbose", action="store_true", default=False)


def _noise_args(p):
    p.add_argument("--depth-sigma", type=float, default=MODERATE_NOISE.depth_sigma)
    p.add_argument("--outlier-fraction", type=float, default=MODERATE_NOISE.outlier_fraction)
    p.add_argument("--normal-sigma", type=float, default=MODERATE_NOISE.normal_sigma_deg)
    p.add_argument("--edge-noise", type=float, default=MODERATE_NOISE.edge_noise)
    p.add_argument("--outlier-blob", type=int, default=MODERATE_NOISE.outlier_blob)


def _filter_args(p):
    p.add_argument("--k", type=int, default=DncConfig.k)
    p.add_argument("--tau-d", type=float, default=DncConfig.tau_d)
    p.add_argument("--tau-n", type=float, default=AnrConfig.tau_n)


def _scene_args(p):
    p.add_argument("--width", type=int, default=None, help="image width (scene default if unset)")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--cameras", type=int, default=None, help="number of cameras (scene default if unset)")


def _mesh_args(p):
    p.add_argument("--tau-rel", type=float, default=FusionConfig.tau_rel)
    p.add_argument("--edge-rel", type=float, default=FusionConfig.edge_rel)
    p.add_argument("--max-depth", type=int, default=OctreeConfig.max_depth)
    p.add_argument("--expand-threshold", type=int, default=OctreeConfig.expand_threshold)
    p.add_argument("--uniform", action="store_true", default=False, help="dense marching cubes instead of the octree")
    p.add_argument("--voxel-size", type=_positive_float, default=0.01)
    p.add_argument("--bounds", type=_box, default=None, help="reconstruction box x0,y0,z0,x1,y1,z1")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="priorfuse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="render a synthetic dataset and its ground-truth mesh")
    _common(p)
    p.add_argument("--scene", choices=sorted(SCENES), default="plane-sphere")
    p.add_argument("--out", required=True)
    p.add_argument("--depth-scale", type=_positive_float, default=0.0001)
    p.add_argument("--gt-resolution", type=_positive_float, default=0.02)
    _scene_args(p)
    _noise_args(p)

    p = sub.add_parser("filter-depth", help="DNC-filter every frame of a dataset")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _filter_args(p)

    p = sub.add_parser("filter-normal", help="ANR-filter prior normals against rendered normals")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--rendered", default=None,
                   help="directory of camera-frame rendered normal PNGs named <frame id>.png; "
                        "defaults to normals rendered from the dataset depth")
    p.add_argument("--out", required=True)
    p.add_argument("--tau-n", type=float, default=AnrConfig.tau_n)

    p = sub.add_parser("loss", help="evaluate the depth, normal and total losses at one step")
    _common(p)
    p.add_argument("--step", type=_nonneg_int, required=True)
    p.add_argument("--rendered-depth", required=True)
    p.add_argument("--raw-depth", required=True)
    p.add_argument("--filtered-depth", required=True)
    p.add_argument("--rendered-normal", required=True)
    p.add_argument("--prior-normal", required=True)
    p.add_argument("--filtered-normal", required=True)
    p.add_argument("--rendered-rgb", default=None)
    p.add_argument("--reference-rgb", default=None)
    p.add_argument("--depth-scale", type=_positive_float, default=0.001)
    p.add_argument("--t-d", type=_nonneg_int, default=LossSchedule.t_d)
    p.add_argument("--t-n", type=_nonneg_int, default=LossSchedule.t_n)
    p.add_argument("--normal-start", type=_nonneg_int, default=LossSchedule.normal_start)
    p.add_argument("--lambda-d", type=float, default=LossSchedule.lambda_d)
    p.add_argument("--lambda-n", type=float, default=LossSchedule.lambda_n)
    p.add_argument("--out", default=None)

    p = sub.add_parser("fuse-mesh", help="fuse a dataset into a mesh")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _mesh_args(p)

    p = sub.add_parser("eval", help="compare two PLY meshes")
    _common(p)
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--threshold", type=_positive_float, default=0.05)
    p.add_argument("--crop", type=_box, default=None)
    p.add_argument("--json", default=None, help="also write the structured record here")

    p = sub.add_parser("pipeline", help="synthesise or load, filter, fuse, mesh and evaluate")
    _common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scene", choices=sorted(SCENES), default=None)
    src.add_argument("--manifest", default=None)
    p.add_argument("--gt", default=None, help="ground-truth PLY when using --manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--no-filters", action="store_true", default=False)
    p.add_argument("--no-completion", action="store_true", default=False)
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--threshold", type=_positive_float, default=0.05)
    _scene_args(p)
    _filter_args(p)
    _noise_args(p)
    _mesh_args(p)
    # desk-scale defaults: a few hundred thousand hints rather than millions
    for a in p._actions:
        if a.dest == "max_depth":
            a.default = 8
        elif a.dest == "expand_threshold":
            a.default = 8
    return ap


def parse(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # find the subparser so config layering sees its options
    ns0, _ = _peek(ap, argv)
    sub = _subparsers(ap)[ns0]
    ns = resolve(sub, argv[argv.index(ns0) + 1:])
    ns.command = ns0
    return ns


def _subparsers(ap) -> dict:
    for a in ap._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices
    raise AssertionError("parser has no subcommands")


def _peek(ap, argv):
    cmds = _subparsers(ap)
    for tok in argv:
        if tok in ("-h", "--help"):
            ap.parse_args([tok])
        if tok in cmds:
            return tok, None
        if not tok.startswith("-"):
            break
    raise UsageError(f"expected a subcommand, one of {sorted(cmds)}")


# --- helpers -----------------------------------------------------------------------

def _noise(ns) -> NoiseModel:
    return NoiseModel(ns.depth_sigma, ns.outlier_fraction, ns.normal_sigma, ns.edge_noise, ns.outlier_blob)


def _scene(ns, name):
    kw = {k: v for k, v in (("width", ns.width), ("height", ns.height), ("n_cameras", ns.cameras))
          if v is not None}
    for k, v in kw.items():
        if v < 1:
            raise UsageError(f"--{k.replace('n_', '')} must be >= 1")
    return make_scene(name, **kw)


def _pipeline_cfg(ns, filters: bool = True) -> PipelineConfig:
    kw = dict(seed=ns.seed, workers=ns.workers)
    if hasattr(ns, "k"):
        kw.update(dnc=DncConfig(ns.k, ns.tau_d), anr=AnrConfig(ns.tau_n))
    if hasattr(ns, "tau_rel"):
        kw.update(fusion=FusionConfig(tau_rel=ns.tau_rel, edge_rel=ns.edge_rel),
                  octree=OctreeConfig(max_depth=ns.max_depth, expand_threshold=ns.expand_threshold),
                  uniform=ns.uniform, voxel_size=ns.voxel_size)
    if hasattr(ns, "samples"):
        kw.update(eval_samples=ns.samples, eval_threshold=ns.threshold)
    if hasattr(ns, "no_completion"):
        kw.update(completion=not ns.no_completion)
    return PipelineConfig(filters=filters, **kw)


def _derived_manifest(src: DatasetManifest, out: Path, depth_dir: Optional[str],
                      normal_dir: Optional[str]) -> DatasetManifest:
    """Manifest in ``out`` pointing at new depth / normal PNGs and the source's other files."""
    records = []
    for rec in src.frames:
        depth = f"{depth_dir}/{rec.frame_id}.png" if depth_dir else str(src.root / rec.depth)
        normal = f"{normal_dir}/{rec.frame_id}.png" if normal_dir else str(src.root / rec.normal)
        color = None if rec.color is None else str(src.root / rec.color)
        records.append(FrameRecord(rec.frame_id, depth, normal, rec.pose, color, rec.intrinsics))
    return DatasetManifest(out, records, src.intrinsics, src.depth_scale, CAMERA)


# --- subcommands -------------------------------------------------------------------

def cmd_synth(ns) -> int:
    scene = _scene(ns, ns.scene)
    renders = render_scene(scene, _noise(ns), ns.seed)
    out = Path(ns.out)
    path = write_dataset(out, [r.frame for r in renders], ns.depth_scale)
    save_mesh(out / "gt.ply", scene.gt_mesh(ns.gt_resolution))
    _write_json(out / "scene.json", {"scene": scene.name, "bounds": [list(map(float, b)) for b in scene.bounds],
                                     "seed": ns.seed, "frames": len(renders)})
    print(f"wrote {len(renders)} frames to {path}")
    return EXIT_OK


def cmd_filter_depth(ns) -> int:
    man = DatasetManifest.load(ns.manifest)
    frames = load_dataset(ns.manifest)
    cfg = DncConfig(ns.k, ns.tau_d)
    out = Path(ns.out)
    reports = []
    for fr in frames:
        n_d = depth_normals_knn(fr.depth, fr.intrinsics, fr.pose, cfg.k, workers=ns.workers)
        d_f, rep = dnc_filter_depth(fr.depth, n_d, fr.world_normals(), cfg)
        save_depth_png(out / "depth" / f"{fr.frame_id}.png", d_f, man.depth_scale)
        reports.append({"frame": fr.frame_id, **rep.to_dict()})
    atomic_write_text(out / "manifest.json", _derived_manifest(man, out, "depth", None).to_json())
    _write_json(out / "report.json", {"k": cfg.k, "tau_d": cfg.tau_d, "frames": reports})
    print(json.dumps({"frames": len(reports), "removed": sum(r["removed"] for r in reports)}))
    return EXIT_OK


def cmd_filter_normal(ns) -> int:
    man = DatasetManifest.load(ns.manifest)
    frames = load_dataset(ns.manifest)
    cfg = AnrConfig(ns.tau_n)
    out = Path(ns.out)
    reports = []
    for fr in frames:
        if ns.rendered:
            p = Path(ns.rendered) / f"{fr.frame_id}.png"
            if not p.is_file():
                raise InvalidInputError(f"frame {fr.frame_id!r}: missing rendered normal {p}")
            n_hat = NormalMap(load_normal_png(p), CAMERA)
        else:
            n_hat = render_normal_from_depth(fr.depth, fr.intrinsics)
        n_f, rep = anr_filter_normals(n_hat, fr.normals.to_camera(fr.pose), cfg)
        save_normal_png(out / "normal" / f"{fr.frame_id}.png", n_f.values)
        reports.append({"frame": fr.frame_id, **rep.to_dict()})
    atomic_write_text(out / "manifest.json", _derived_manifest(man, out, None, "normal").to_json())
    _write_json(out / "report.json", {"tau_n": cfg.tau_n, "frames": reports})
    print(json.dumps({"frames": len(reports), "removed": sum(r["removed"] for r in reports)}))
    return EXIT_OK


def _load_rgb(path):
    from PIL import Image
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.float64) / 255.0


def cmd_loss(ns) -> int:
    sched = LossSchedule(t_d=ns.t_d, t_n=ns.t_n, normal_start=ns.normal_start,
                         lambda_d=ns.lambda_d, lambda_n=ns.lambda_n)
    ds = ns.depth_scale
    maps = dict(
        d_hat=load_depth_png(ns.rendered_depth, ds), d_raw=load_depth_png(ns.raw_depth, ds),
        d_filtered=load_depth_png(ns.filtered_depth, ds),
        n_hat=NormalMap(load_normal_png(ns.rendered_normal), CAMERA),
        n_p=NormalMap(load_normal_png(ns.prior_normal), CAMERA),
        n_f=NormalMap(load_normal_png(ns.filtered_normal), CAMERA),
    )
    if (ns.rendered_rgb is None) != (ns.reference_rgb is None):
        raise UsageError("--rendered-rgb and --reference-rgb go together")
    rgb = {}
    if ns.rendered_rgb:
        rgb = dict(rendered_rgb=_load_rgb(ns.rendered_rgb), reference_rgb=_load_rgb(ns.reference_rgb))
    rep = compute_losses(ns.step, sched=sched, **maps, **rgb)
    text = json.dumps({"step": ns.step, **rep.to_dict()}, indent=2) + "\n"
    if ns.out:
        atomic_write_text(ns.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_fuse_mesh(ns) -> int:
    frames = load_dataset(ns.manifest)
    cfg = _pipeline_cfg(ns, filters=False)
    res = reconstruct(frames, cfg, ns.bounds)
    if res.mesh.is_empty:
        log.warning("extracted mesh is empty")
    save_mesh(ns.out, res.mesh)
    print(json.dumps({"vertices": len(res.mesh.vertices), "triangles": len(res.mesh.triangles),
                      "finest_voxel": res.finest_voxel}))
    return EXIT_OK


def cmd_eval(ns) -> int:
    m = evaluate(load_mesh(ns.pred), load_mesh(ns.gt), ns.samples, ns.threshold, ns.seed, ns.crop,
                 workers=ns.workers)
    if ns.json:
        atomic_write_text(ns.json, m.to_json())
    sys.stdout.write(m.to_text())
    return EXIT_OK


def cmd_pipeline(ns) -> int:
    cfg = _pipeline_cfg(ns, filters=not ns.no_filters)
    out = Path(ns.out)
    if ns.manifest:
        frames = load_dataset(ns.manifest)
        gt = load_mesh(ns.gt) if ns.gt else None
        res = run_frames(frames, cfg, ns.bounds, gt)
    else:
        scene = _scene(ns, ns.scene or "room")
        renders = render_scene(scene, _noise(ns), ns.seed)
        bounds = ns.bounds if ns.bounds is not None else scene.bounds
        res = run_frames([r.frame for r in renders], cfg, bounds, scene.gt_mesh())
    save_mesh(out / "mesh.ply", res.mesh)
    if res.metrics is not None:
        atomic_write_text(out / "metrics.json", res.metrics.to_json())
        sys.stdout.write(res.metrics.to_text())
    _write_json(out / "report.json", res.report())
    print(f"mesh: {len(res.mesh.vertices)} vertices, {len(res.mesh.triangles)} triangles, "
          f"finest voxel {res.finest_voxel:.4f} m")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "filter-depth": cmd_filter_depth,
    "filter-normal": cmd_filter_normal,
    "loss": cmd_loss,
    "fuse-mesh": cmd_fuse_mesh,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        ns = parse(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # anything else is a bug or a broken invariant
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
