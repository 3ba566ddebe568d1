"""
Cleaning a raw CTG recording
============================

A synthetic recording gets three kinds of damage: an out-of-range FHR
burst, a short spike and a stretch where the UC transducer reads a flat
line. The pipeline marks each one invalid and fills it in.
"""

import numpy as np

from ctgmae.data import Recording
from ctgmae.preprocess import preprocess_pipeline
from ctgmae.synth import SynthConfig, generate_recording

raw, events = generate_recording(SynthConfig(duration_s=900, seed=7))
print(f"{raw.id}: {len(raw)} samples, {len(events.contractions)} contractions")

# damage the signal
fhr, uc = raw.fhr.copy(), raw.uc.copy()
fhr[400:410] = 235.0          # implausible
fhr[1200:1203] += 45.0        # spike that returns to baseline
uc[2000:2300] = 25.0          # dead transducer, 75 s
damaged = Recording.from_arrays(raw.id, fhr, uc)

clean = preprocess_pipeline(damaged)

# every repaired sample is flagged, nothing else is
def spans(mask):
    edges = np.diff(np.r_[0, mask.astype(int), 0])
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


print("FHR filled:", spans(clean.fhr_synthetic))
print("UC filled:", spans(clean.uc_synthetic))

# normalized copies feed the model
print("fhr_norm range", clean.fhr_norm.min().round(3), clean.fhr_norm.max().round(3))
print("uc_norm range", clean.uc_norm.min().round(3), clean.uc_norm.max().round(3))
