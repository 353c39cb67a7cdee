"""
Why local gradients survive a change of modality
================================================

A phantom is compared with an intensity-remapped copy of itself. The remap
is non-monotone (dark stays dark-ish, mid-grey becomes bright, bright
becomes dark), the kind of relation seen between two MR contrasts.
Windowed correlation only tolerates affine intensity changes, so it drops.
The local-gradient similarity only looks at the orientation of edges and
ignores their sign, so it barely moves.

Run with ``python demos/01_modality_invariance.py``.
"""

import numpy as np

from deformreg.similarity import lcc_similarity, lg_similarity
from deformreg.synth import ModalityRemapSpec, make_phantom, remap_modality

# %%
# A 32^3 phantom and its remapped twin. No noise, no deformation.
phantom, labels = make_phantom((32, 32, 32), seed=0)
p = np.asarray(phantom)
spec = ModalityRemapSpec()
f = np.asarray(remap_modality(p, spec))
print("remap knots (in -> out):", spec.knots)
print("labels present:", sorted(np.unique(np.asarray(labels)).tolist()))

# %%
# Both similarities are sums over voxels; dividing by the voxel count puts
# them on a per-voxel scale where 1 means "identical" for both. Neither
# reaches 1 on the identical pair: windows that sit entirely in the flat
# background have no edge and no variance, and count as 0.
n = p.size


def per_voxel(fn, a, b):
    return fn(a, b, with_grad=False).value / n


rows = [
    ("identical", p),
    ("negated", -p),
    ("remapped", f),
]
print(f"{'floating':<10s} {'LG':>7s} {'LCC':>7s}")
for name, other in rows:
    print(f"{name:<10s} {per_voxel(lg_similarity, p, other):7.3f} {per_voxel(lcc_similarity, p, other):7.3f}")

# %%
# The same comparison, as relative change from the identical pair.
lg0, cc0 = per_voxel(lg_similarity, p, p), per_voxel(lcc_similarity, p, p)
print(f"LG change under remap:  {100 * abs(per_voxel(lg_similarity, p, f) - lg0) / lg0:.1f}%")
print(f"LCC drop under remap:   {100 * (1 - per_voxel(lcc_similarity, p, f) / cc0):.1f}%")
