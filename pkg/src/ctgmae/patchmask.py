"""Patch tokenization and the FHR-only block mask used for pretraining."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def n_patches(length, patch_len, stride):
    if length < patch_len:
        raise ValueError(f"window of {length} samples is shorter than patch length {patch_len}")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    return (length - patch_len) // stride + 1


@dataclass(frozen=True, eq=False)
class PatchSequence:
    channel: str
    patches: np.ndarray  # (N, P)
    patch_len: int
    stride: int
    source_window_start: int = 0

    def __len__(self):
        return self.patches.shape[0]


def patch_windows(windows, patch_len, stride):
    """Patch a batch of windows ``(..., L)`` into ``(..., N, P)`` (copied)."""
    windows = np.asarray(windows, dtype=np.float64)
    n_patches(windows.shape[-1], patch_len, stride)
    view = sliding_window_view(windows, patch_len, axis=-1)[..., ::stride, :]
    return np.ascontiguousarray(view)


def patchify(window, patch_len=48, stride=24, channel="FHR", start=0) -> PatchSequence:
    return PatchSequence(channel, patch_windows(window, patch_len, stride), patch_len, stride, start)


@dataclass(frozen=True, eq=False)
class MaskPattern:
    masked: np.ndarray  # bool, length N
    ratio_target: float

    def __len__(self):
        return len(self.masked)

    @property
    def indices(self):
        return np.flatnonzero(self.masked)


def mask_target(n, ratio):
    """Number of patches to mask: ``ratio`` of the N-2 interior patches, rounded half up."""
    return int(np.floor(ratio * (n - 2) + 0.5))


def generate_mask(n, ratio, rng) -> MaskPattern:
    """Draw a block mask over ``n`` patches.

    The first and last patches are never masked, masked patches come in
    runs of at least two, and the masked count lands within one of
    :func:`mask_target`.  Blocks of 2-4 patches are placed uniformly over
    the free interior positions; when fragmentation leaves no room for a
    block, an existing run is grown by one patch instead.
    """
    if n < 4:
        raise ValueError(f"need at least 4 patches to place a masked run, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    target = mask_target(n, ratio)
    masked = np.zeros(n, dtype=bool)
    gaps = [(1, n - 2)]  # free stretches as (start, length)
    count = 0
    while count < target:
        longest = min(4, target + 1 - count)
        first = 2 + int(rng.integers(longest - 1))
        placed = False
        for length in range(first, 1, -1):
            slots = [max(0, g - length + 1) for _, g in gaps]
            total = sum(slots)
            if total == 0:
                continue
            pick = int(rng.integers(total))
            for gi, s in enumerate(slots):
                if pick < s:
                    break
                pick -= s
            start, g = gaps[gi]
            pos = start + pick
            masked[pos:pos + length] = True
            pieces = [(start, pick), (pos + length, g - pick - length)]
            gaps[gi:gi + 1] = [p for p in pieces if p[1] > 0]
            count += length
            placed = True
            break
        if placed:
            continue
        # grow an existing run by one patch at a gap edge touching it
        edges = []
        for gi, (start, g) in enumerate(gaps):
            if masked[start - 1]:
                edges.append((gi, start))
            if masked[start + g]:
                edges.append((gi, start + g - 1))
        if not edges:
            break
        gi, pos = edges[int(rng.integers(len(edges)))]
        start, g = gaps[gi]
        masked[pos] = True
        rest = (start + 1, g - 1) if pos == start else (start, g - 1)
        gaps[gi:gi + 1] = [rest] if rest[1] > 0 else []
        count += 1
    return MaskPattern(masked, ratio)


def apply_mask(fhr: PatchSequence, uc: PatchSequence, mask: MaskPattern):
    """Zero the masked FHR patches; UC is returned untouched."""
    if len(fhr) != len(uc) or len(mask) != len(fhr):
        raise ValueError(f"patch counts differ: FHR {len(fhr)}, UC {len(uc)}, mask {len(mask)}")
    out = fhr.patches.copy()
    out[mask.masked] = 0.0
    return PatchSequence(fhr.channel, out, fhr.patch_len, fhr.stride, fhr.source_window_start), uc
