"""
Scaling and tile-pair counts
============================

The bench module times forward and backward passes over a grid of splat
counts and output sizes, fits a power law to the medians and counts the
Gaussian-tile pairs produced by the two bounding rules.
"""

# %%
# Tile pairs: density-aware rectangles against circumscribed squares on
# splats stretched 10:1 along the detector's v axis.

from gsct import bench

c = bench.anisotropic_bounding(2000, 128, anisotropy=10.0)
print(f"rectangles {c.rectangular}  squares {c.square}  ratio {c.ratio:.3f}")

# %%
# A small timing sweep.  Absolute times depend on the machine; the slope of
# log time against log pixel count is the quantity of interest.

rows = bench.sweep("rasterize", [5000], [64, 128, 256], repeats=5, warmup=1)
for r in rows:
    print(f"{r.size:4d}^2  forward {r.forward_ms:7.2f} ms (iqr {r.forward_iqr_ms:.2f})  "
          f"backward {r.backward_ms:7.2f} ms  pairs {r.tile_pairs}")
slope, r2 = bench.fit_power_law(rows)
print(f"slope {slope:.3f}  r^2 {r2:.4f}")
