"""Global-only RANSAC versus the patch cascade on a scene with tiny primitives.

Run: python3 demos/03_cascade_small_primitives.py   (about half a minute)
"""

from primcascade import cloud as cl
from primcascade import pipeline as pl
from primcascade import scenes

scene = cl.synthesize_scene(scenes.small_primitive_spec(seed=0), 131072, 5e-3)
print(f"{len(scene.surfaces)} primitives; point shares:",
      " ".join(f"{f:.3f}" for f in sorted(
          (scene.cloud.gt_label == k).mean() for k in range(len(scene.surfaces)))))

baseline = pl.PipelineConfig(use_patches=False, global_resolution="low")
cascade = pl.PipelineConfig()
low = pl.downsample(cascade, scene.cloud)  # both runs share one downsampling

for name, cfg in (("global only", baseline), ("cascade", cascade)):
    res = pl.run_pipeline(cfg, scene, low)
    rep = res.report
    buckets = "  ".join(f"{k} {'-' if v is None else f'{v:5.1f}'}"
                        for k, v in rep.per_scale_miou.items())
    print(f"{name:12s} mIoU {rep.seg_miou:5.1f}  patches {len(res.cover):2d}  {buckets}")
