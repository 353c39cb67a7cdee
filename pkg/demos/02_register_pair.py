"""
Registering a synthetic multi-modal pair
========================================

A reference is made by deforming a phantom with a known field; the
floating image is the undeformed phantom pushed through a non-monotone
intensity remap plus noise. We register it twice, once with the local
gradient term alone and once with the alternating scheme that also trains
an intensity translator so windowed correlation becomes usable, and then
score both against the ground truth.

Takes about half a minute on one core. Slices are written to ``demo_out/``.
"""

import os

import numpy as np

from deformreg.evaluation import dice_per_label, endpoint_error, interior_mask, rmse_percent
from deformreg.field import jacobian_stats, warp, warp_nearest
from deformreg.registration import RegistrationConfig, register
from deformreg.synth import ModalityRemapSpec, SyntheticDeformSpec, make_pair
from deformreg.volume import export_slice

out_dir = "demo_out"
os.makedirs(out_dir, exist_ok=True)

# %%
dims = (32, 32, 32)
pair = make_pair(dims, SyntheticDeformSpec(seed=1), ModalityRemapSpec(noise_sigma=0.02, seed=1), seed=1)
ref, flo, gt = np.asarray(pair.ref), np.asarray(pair.flo), np.asarray(pair.gt)
print("ground-truth displacement, max |u|: %.2f voxels" % np.linalg.norm(gt, axis=0).max())

# %%
# The target for intensity error is the floating image warped by the true
# field: it lives in the floating modality, so no translator is involved
# in scoring.
target = warp(flo, gt)
mask = interior_mask(dims)
print(f"before: EPE {endpoint_error(np.zeros_like(gt), gt, mask):.2f} vox, RMSE {rmse_percent(flo, target):.2f}%")

# %%
results = {}
for mode in ("lg_only", "full_alternating"):
    res = register(ref, flo, RegistrationConfig(mode=mode))
    u = np.asarray(res.field)
    dice = dice_per_label(warp_nearest(np.asarray(pair.mask_flo), u), np.asarray(pair.mask_ref))
    results[mode] = res
    print(
        f"{mode:<17s} EPE {endpoint_error(u, gt, mask):.2f} vox, RMSE {rmse_percent(warp(flo, u), target):.2f}%, "
        f"mean Dice {np.mean(list(dice.values())):.3f}, min det J {jacobian_stats(u).min_det:.2f}, "
        f"{res.report.runtime_seconds['register']:.1f}s"
    )

# %%
# Loss per pyramid level: the objective is per voxel, so levels compare.
rep = results["full_alternating"].report
for k, (a, b) in enumerate(zip(rep.level_start_loss, rep.level_end_loss)):
    print(f"level {k}: total loss {a:+.4f} -> {b:+.4f}")

# %%
z = dims[2] // 2
export_slice(ref, 2, z, os.path.join(out_dir, "ref.png"))
export_slice(flo, 2, z, os.path.join(out_dir, "flo.png"))
for mode, res in results.items():
    export_slice(warp(flo, res.field), 2, z, os.path.join(out_dir, f"warped_{mode}.png"))
print("slices written to", out_dir)
