"""
Patches and channel-asymmetric masks
====================================

A 450 s window at 4 Hz splits into 74 overlapping patches of 12 s. The
mask hides blocks of FHR patches (never the first or last, never a lone
patch) and leaves every UC patch visible.
"""

import numpy as np

from ctgmae.patchmask import apply_mask, generate_mask, patchify
from ctgmae.preprocess import preprocess_pipeline
from ctgmae.synth import SynthConfig, generate_recording

rec = preprocess_pipeline(generate_recording(SynthConfig(seed=3))[0])
fhr = patchify(rec.fhr_norm[:1800], channel="FHR")
uc = patchify(rec.uc_norm[:1800], channel="UC")
print(f"{len(fhr)} patches of {fhr.patches.shape[1]} samples")

rng = np.random.default_rng(0)
for ratio in (0.2, 0.4, 0.6):
    m = generate_mask(len(fhr), ratio, rng)
    row = "".join("#" if x else "." for x in m.masked)
    print(f"ratio {ratio:.1f}  {m.masked.sum():2d} masked  {row}")

m = generate_mask(len(fhr), 0.4, rng)
f_masked, u_masked = apply_mask(fhr, uc, m)
print("masked FHR patches are zero:", bool((f_masked.patches[m.masked] == 0).all()))
print("UC untouched:", np.array_equal(u_masked.patches, uc.patches))
