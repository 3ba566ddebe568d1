"""Slow, obviously-correct reference computations used as test oracles.

Nothing here imports from ctgmae; each function is a straight loop over
the definition so it can be checked by eye.
"""
from __future__ import annotations

from fractions import Fraction


def brute_auc(labels, scores):
    """Mean over (positive, negative) pairs of [s+ > s-] + 1/2 [s+ == s-]."""
    pos = [s for y, s in zip(labels, scores) if y]
    neg = [s for y, s in zip(labels, scores) if not y]
    twice = 0
    for a in pos:
        for b in neg:
            twice += 2 if a > b else (1 if a == b else 0)
    return float(Fraction(twice, 2 * len(pos) * len(neg)))


def reference_segments(scores, covered, threshold=0.5):
    """Single pass over the trace; sums are exact and rounded once at the end.

    Returns ``(start, end, length, max, cumsum, weighted_integral)`` tuples.
    """
    out = []
    start = None
    for i in range(len(scores) + 1):
        inside = i < len(scores) and covered[i] and scores[i] > threshold
        if inside and start is None:
            start = i
        elif not inside and start is not None:
            vals = [float(v) for v in scores[start:i]]
            total = sum((Fraction(v) for v in vals), Fraction(0))
            wi = sum((Fraction((v - 0.5) ** 2) for v in vals), Fraction(0))
            out.append((start, i, i - start, max(vals), float(total), float(wi)))
            start = None
    return out


def runs(flags):
    """Maximal runs of True as ``(start, length)``."""
    out, start = [], None
    for i, f in enumerate(list(flags) + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            out.append((start, i - start))
            start = None
    return out


def mask_violations(masked, ratio):
    """Human-readable list of broken mask rules (empty when legal)."""
    n = len(masked)
    problems = []
    if masked[0] or masked[-1]:
        problems.append("boundary patch masked")
    if any(length < 2 for _, length in runs(masked)):
        problems.append("isolated masked patch")
    target = int(Fraction(ratio).limit_denominator(10**9) * (n - 2) + Fraction(1, 2))
    count = sum(bool(m) for m in masked)
    if abs(count - target) > 1:
        problems.append(f"count {count} vs target {target}")
    return problems


def linear_fill(values, valid):
    """Interior gaps on the chord between neighbours, edges held constant."""
    known = [i for i, ok in enumerate(valid) if ok]
    out = list(values)
    for i in range(len(values)):
        if valid[i]:
            continue
        left = max((k for k in known if k < i), default=None)
        right = min((k for k in known if k > i), default=None)
        if left is None:
            out[i] = values[right]
        elif right is None:
            out[i] = values[left]
        else:
            w = (i - left) / (right - left)
            out[i] = values[left] + w * (values[right] - values[left])
    return out
