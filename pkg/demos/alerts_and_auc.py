"""
From a risk trace to a recording-level score
=============================================

Sliding-window inference produces one probability per stride. Runs above
0.5 become alert segments; the largest segment's four features feed a
logistic model. Here the classifier is untrained, so the trace itself is
arbitrary; the point is the bookkeeping.
"""

import numpy as np

from ctgmae.inference import classify_recording, extract_alerts, largest_segment, sliding_predict
from ctgmae.metrics import accuracy, auc
from ctgmae.model import ModelConfig, init_params
from ctgmae.preprocess import preprocess_pipeline
from ctgmae.synth import SynthConfig, generate_recording
from ctgmae.train import fit_logistic

params = init_params(ModelConfig.tiny(head_type="classification"), seed=4)
rec = preprocess_pipeline(generate_recording(SynthConfig(duration_s=1800, seed=2))[0])
trace = sliding_predict(params, rec, stride=240)
print(f"{np.isfinite(trace.scores).sum()} of {len(trace)} samples covered")

# lower the threshold so this untrained model produces some segments
cut = float(np.nanmedian(trace.scores))
segments = extract_alerts(trace, threshold=cut)
for s in segments:
    print(f"  [{s.start}, {s.end})  max {s.max:.3f}  cumsum {s.cumsum:.1f}  wi {s.weighted_integral:.4f}")
print("largest:", largest_segment(segments))

# a toy alert model: longer segments mean trouble
rng = np.random.default_rng(0)
lengths = rng.integers(0, 3000, 60)
y = lengths + rng.normal(0, 600, 60) > 1800
feats = np.column_stack([lengths, 0.6 + 0.3 * rng.random(60), 0.7 * lengths, 0.02 * lengths])
model = fit_logistic(feats, y)
print(f"recording probability {classify_recording(segments, model):.3f}")

scores = model.predict_proba(feats)
print(f"in-sample AUC {auc(y, scores):.3f}, accuracy {accuracy(y, scores):.3f}")
