"""
Fitting splats to a volume and storing them compactly
=====================================================

Splats can also be fitted directly to a voxel volume.  The fitted cloud is
then written in the half-precision format: 22 bytes per splat plus a 16-byte
header.
"""

# %%

import tempfile
from pathlib import Path

from gsct import initialization as I
from gsct import io
from gsct import phantom as P
from gsct.metrics import psnr, ssim3d_score
from gsct.optim import TrainConfig, train_volume_fit
from gsct.voxelizer import voxelize

ph = P.ellipsoid_phantom(32, seed=3)
start = I.init_from_sampling(ph, I.InitConfig(n_gaussians=1500, seed=0), "gradient")
result = train_volume_fit(start, ph, TrainConfig(iterations=100, densify=False, eval_every=25))
for rec in result.log:
    if "psnr" in rec:
        print(f"iter {rec['epoch']:4d}  loss {rec['loss']:.5f}  PSNR {rec['psnr']:.2f}  "
              f"SSIM3D {rec['ssim3d']:.4f}")

# %%
# Compression round trip
# ----------------------

with tempfile.TemporaryDirectory() as d:
    path = io.save_compressed(Path(d) / "fit.fgsc", result.cloud)
    size = path.stat().st_size
    back = io.load_compressed(path)
print(f"{len(result.cloud)} splats -> {size} bytes (16 + 22 * {len(result.cloud)})")
print(f"raw volume would take {4 * ph.values.size} bytes")
before = voxelize(result.cloud, ph).values
after = voxelize(back, ph).values
print(f"PSNR {psnr(before, ph.values, 1.0):.3f} -> {psnr(after, ph.values, 1.0):.3f} dB, "
      f"SSIM3D {ssim3d_score(after, ph.values):.4f}")
