"""Compare hint-octree meshing with dense marching cubes at the same finest voxel.

Scores both meshes on the floor+object scene over the hint bounding box,
padded by a few voxels so the floor plane lies inside it.
"""

import argparse
import time

from priorfuse.evalmetrics import evaluate
from priorfuse.fusion import FusionVolume
from priorfuse.isooctree import OctreeConfig, build_hint_octree, extract_isooctree_mesh, sample_corners
from priorfuse.marching import uniform_marching_cubes
from priorfuse.synth import NoiseModel, floor_object_scene, render_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--width", type=int, default=320)
    ap.add_argument("--height", type=int, default=240)
    ap.add_argument("--max-depth", type=int, default=9)
    ap.add_argument("--expand-threshold", type=int, default=50)
    args = ap.parse_args()

    scene = floor_object_scene(args.width, args.height)
    vol = FusionVolume.from_frames([r.frame for r in render_scene(scene, NoiseModel())])
    hints = vol.hint_cloud()
    t0 = time.perf_counter()
    tree = build_hint_octree(hints, OctreeConfig(max_depth=args.max_depth, expand_threshold=args.expand_threshold))
    sample_corners(tree, vol)
    octm = extract_isooctree_mesh(tree)
    t1 = time.perf_counter()
    vox = tree.finest_width
    lo, hi = hints.min(axis=0), hints.max(axis=0)
    pad = 3 * vox
    unim = uniform_marching_cubes(vol, (lo - pad, hi + pad), vox)
    t2 = time.perf_counter()
    print(f"finest voxel {vox:.4f} m, leaves per level {tree.depth_histogram}")
    print(f"octree  {len(octm.vertices):8d} vertices  {t1 - t0:6.1f}s")
    print(f"uniform {len(unim.vertices):8d} vertices  {t2 - t1:6.1f}s  ratio {len(octm.vertices) / len(unim.vertices):.3f}")
    gt = scene.gt_mesh(0.02)
    box = (lo - pad, hi + pad)
    mo, mu = evaluate(octm, gt, crop_box=box), evaluate(unim, gt, crop_box=box)
    print(f"chamfer octree {mo.chamfer_l1:.5f} uniform {mu.chamfer_l1:.5f} ({mo.chamfer_l1 / mu.chamfer_l1 - 1:+.3f})")


if __name__ == "__main__":
    main()
