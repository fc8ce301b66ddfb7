"""
Rendering splats and checking their gradients
=============================================

A cloud of anisotropic Gaussians is rendered as X-ray line integrals in
parallel and cone geometry.  The backward pass is then compared with central
finite differences of a random linear functional of the image.
"""

# %%
# A small random cloud
# --------------------
# Raw parameters are stored unconstrained: log-scales, an unnormalized
# quaternion and a raw density clamped at zero when read.

import numpy as np

from gsct import GaussianCloud, ScanGeometry
from gsct.projector import RenderPass, rasterize_view

rng = np.random.default_rng(0)
m = 12
cloud = GaussianCloud(
    rng.uniform(-0.5, 0.5, (m, 3)),
    np.log(rng.uniform(0.05, 0.2, (m, 3))),
    rng.normal(size=(m, 4)),
    rng.uniform(0.2, 1.0, m),
)
print(f"{len(cloud)} splats, densities in [{cloud.densities.min():.2f}, {cloud.densities.max():.2f}]")

# %%
# Two geometries
# --------------
# Angles are in radians about the z axis.  Cone geometry adds the
# source-to-origin and origin-to-detector distances.

par = ScanGeometry("parallel", (64, 64), (0.03, 0.03), [0.0, 0.8])
cone = ScanGeometry("cone", (64, 64), (0.045, 0.045), [0.0, 0.8], 4.0, 2.0)
for g in (par, cone):
    rp = RenderPass(cloud, g, 1)
    print(f"{g.mode:8s} max {rp.image.max():.4f}  sum {rp.image.sum():.2f}  "
          f"tile pairs {rp.stats.tile_pairs}  culled {rp.stats.culled}")

# %%
# Backward pass against finite differences
# ----------------------------------------
# For ``L = sum(G * image)`` the analytic gradient of every raw parameter
# should match a central difference.

G = rng.normal(size=cone.detector)
grads = RenderPass(cloud, cone, 1).backward(G)
worst = 0.0
for name in GaussianCloud.PARAMS:
    arr, an = getattr(cloud, name), getattr(grads, name)
    for idx in np.ndindex(arr.shape):
        h = 1e-4 * max(abs(arr[idx]), 1e-2)
        hi, lo = cloud.copy(), cloud.copy()
        getattr(hi, name)[idx] += h
        getattr(lo, name)[idx] -= h
        fd = np.sum(G * (rasterize_view(hi, cone, 1) - rasterize_view(lo, cone, 1))) / (2 * h)
        if max(abs(fd), abs(an[idx])) > 1e-6:
            worst = max(worst, abs(fd - an[idx]) / max(abs(fd), abs(an[idx])))
print(f"worst relative gradient error: {worst:.2e}")
