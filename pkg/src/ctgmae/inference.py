"""Sliding-window risk traces and alert segments."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SAMPLE_RATE_HZ
from .model import ModelParams, predict_proba
from .patchmask import patch_windows

DEFAULT_STRIDE = 240  # one minute at 4 Hz


class RecordingTooShort(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PredictionTrace:
    scores: np.ndarray    # NaN where not covered
    window_len: int
    stride: int
    coverage: np.ndarray

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class AlertSegment:
    start: int
    end: int  # exclusive
    max: float
    cumsum: float
    weighted_integral: float

    @property
    def length(self):
        return self.end - self.start

    def features(self):
        return [float(self.length), self.max, self.cumsum, self.weighted_integral]


def window_starts(length, window, stride):
    if length < window:
        raise RecordingTooShort(
            f"recording shorter than context window ({length} < {window} samples)")
    return np.arange(0, length - window + 1, stride)


def sliding_predict(params: ModelParams, rec, stride=DEFAULT_STRIDE) -> PredictionTrace:
    """Classify successive windows and spread each score over the stride it ends.

    A window ending at sample ``e`` annotates samples ``(e - stride, e]``;
    the first window annotates its whole extent.  Samples after the last
    window end stay uncovered.
    """
    cfg = params.config
    window = cfg.context_len
    n = len(rec)
    starts = window_starts(n, window, stride)
    idx = starts[:, None] + np.arange(window)
    probs = predict_proba(params,
                          patch_windows(rec.fhr_norm[idx], cfg.patch_len, cfg.stride),
                          patch_windows(rec.uc_norm[idx], cfg.patch_len, cfg.stride))
    scores = np.full(n, np.nan)
    scores[:window] = probs[0]
    for s, p in zip(starts[1:], probs[1:]):
        scores[s + window - stride:s + window] = p
    return PredictionTrace(scores, window, stride, np.isfinite(scores))


def segment_from_scores(start, values) -> AlertSegment:
    vals = [float(v) for v in values]
    start = int(start)
    return AlertSegment(start, start + len(vals), max(vals), math.fsum(vals),
                        math.fsum((v - 0.5) ** 2 for v in vals))


def extract_alerts(trace: PredictionTrace, threshold=0.5) -> list[AlertSegment]:
    """Maximal runs of covered samples scoring above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    scores = np.asarray(trace.scores, dtype=np.float64)
    above = np.asarray(trace.coverage, dtype=bool) & (np.nan_to_num(scores, nan=0.0) > threshold)
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    return [segment_from_scores(s, scores[s:e]) for s, e in zip(starts, ends)]


def largest_segment(segments):
    """Longest segment; ties go to the larger weighted integral, then the earlier start."""
    if not segments:
        return None
    return min(segments, key=lambda s: (-s.length, -s.weighted_integral, s.start))


def classify_recording(segments, model) -> float:
    """Recording-level probability from the largest alert segment (0 if none)."""
    seg = largest_segment(segments)
    if seg is None:
        return 0.0
    return float(model.predict_proba(seg.features())[0])


def emit_trace(trace: PredictionTrace, rec, segments, path, svg_path=None) -> None:
    """Write ``t_sec,score,fhr_bpm,uc_mmhg,in_alert`` rows, optionally an SVG plot."""
    in_alert = np.zeros(len(trace), dtype=bool)
    for seg in segments:
        in_alert[seg.start:seg.end] = True
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_sec", "score", "fhr_bpm", "uc_mmhg", "in_alert"])
        for i in range(len(trace)):
            score = trace.scores[i]
            w.writerow([f"{i / SAMPLE_RATE_HZ:.2f}", "" if np.isnan(score) else repr(float(score)),
                        f"{rec.fhr[i]:.3f}", f"{rec.uc[i]:.3f}", int(in_alert[i])])
    if svg_path is not None:
        Path(svg_path).write_text(render_svg(trace, rec, segments))


def _polyline(values, lo, hi, top, height, width, step):
    xs = np.arange(0, len(values), step)
    v = np.asarray(values)[xs]
    keep = np.isfinite(v)
    x = xs[keep] / max(len(values) - 1, 1) * width
    y = top + height * (1.0 - (np.clip(v[keep], lo, hi) - lo) / (hi - lo))
    pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(x, y))
    return f'<polyline fill="none" stroke-width="1" points="{pts}"'


def render_svg(trace, rec, segments, width=1000, panel=140, gap=20) -> str:
    """Three stacked panels: score with the 0.5 line, FHR, UC; alerts shaded."""
    n = len(trace)
    step = max(1, n // 2000)
    height = 3 * panel + 4 * gap
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for seg in segments:
        x0 = seg.start / max(n - 1, 1) * width
        x1 = seg.end / max(n - 1, 1) * width
        parts.append(f'<rect x="{x0:.1f}" y="{gap}" width="{x1 - x0:.1f}" height="{panel}" fill="#dddddd"/>')
    y_half = gap + panel / 2
    parts.append(f'<line x1="0" x2="{width}" y1="{y_half}" y2="{y_half}" stroke="red" stroke-dasharray="4"/>')
    panels = [(trace.scores, 0.0, 1.0, "black"), (rec.fhr, 50.0, 210.0, "#c03030"),
              (rec.uc, 0.0, 100.0, "#303030")]
    for k, (values, lo, hi, colour) in enumerate(panels):
        top = gap + k * (panel + gap)
        parts.append(_polyline(values, lo, hi, top, panel, width, step) + f' stroke="{colour}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
