"""Where curvature is a good proxy for small primitives, and where it is not.

Run: python3 demos/04_heatmaps.py
"""

from primcascade import cloud as cl
from primcascade import patching as pt
from primcascade import pipeline as pl
from primcascade import scenes


def pools(scene):
    cfg = pl.PipelineConfig()
    low = pl.downsample(cfg, scene.cloud)
    gt = pl.heatmap_stage(cfg, scene.cloud, low)
    curv = pl.heatmap_stage(pl.PipelineConfig(heatmap=pt.CURVATURE), scene.cloud, low)
    return (set(pt.binarize_and_pool(gt).tolist()),
            set(pt.binarize_and_pool(curv).tolist()))


# Small parts are curved (spheres, thin cylinders) next to large flat panels:
# both heatmaps pick out roughly the same points.
# Small parts are flat facets next to a large sphere and cylinder: curvature
# highlights the big curved surfaces instead.
for name, spec in (("curvature-aligned", scenes.curvature_aligned_spec(0)),
                   ("flat facets", scenes.flat_facet_spec(0))):
    scene = cl.synthesize_scene(spec, 131072, 5e-3)
    gt, curv = pools(scene)
    print(f"{name:18s} scale pool {len(gt):5d}  curvature pool {len(curv):5d}"
          f"  Jaccard {len(gt & curv) / max(1, len(gt | curv)):.3f}")
