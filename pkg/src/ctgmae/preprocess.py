"""Artifact removal, gap filling and normalization of raw CTG channels."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import SAMPLE_RATE_HZ, ParseError, Recording, load_recording

FHR_MIN_BPM, FHR_MAX_BPM = 50.0, 220.0
FHR_CLIP = (50.0, 210.0)
FHR_SCALE = 160.0
UC_CLIP = (0.0, 100.0)
UC_SCALE = 100.0

FLAT_WINDOW = 120  # 30 s at 4 Hz
FLAT_STD = 1e-5
FLAT_MAX_MMHG = 80.0


@dataclass(frozen=True, eq=False)
class CleanRecording:
    """A recording after cleaning: filled channels plus normalized copies.

    ``fhr`` and ``uc`` hold the gap-filled physical values, ``fhr_valid``
    and ``uc_valid`` the validity after artifact removal, and the
    ``*_synthetic`` masks mark the samples that were filled in.
    """

    id: str
    fhr: np.ndarray
    uc: np.ndarray
    fhr_valid: np.ndarray
    uc_valid: np.ndarray
    fhr_norm: np.ndarray
    uc_norm: np.ndarray
    fhr_synthetic: np.ndarray
    uc_synthetic: np.ndarray
    stage2_start_index: int | None = None
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __len__(self):
        return len(self.fhr)

    @property
    def synthetic_mask(self):
        return self.fhr_synthetic | self.uc_synthetic


def remove_implausible_fhr(fhr, valid):
    fhr = np.asarray(fhr, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        ok = (fhr >= FHR_MIN_BPM) & (fhr <= FHR_MAX_BPM)
    return np.asarray(valid, dtype=bool) & ok


def remove_spikes(fhr, valid, jump_bpm=25.0, max_len=5):
    """Invalidate short excursions away from the running FHR level.

    A valid sample that jumps more than ``jump_bpm`` from the previous
    valid sample is a spike if, within the next ``max_len`` samples, the
    signal comes back to within ``jump_bpm`` of the pre-jump level.  The
    samples of the excursion are invalidated.  A jump that does not come
    back is taken as a genuine level change.
    """
    if jump_bpm <= 0:
        raise ValueError("jump_bpm must be positive")
    fhr = np.asarray(fhr, dtype=np.float64)
    out = np.array(valid, dtype=bool)
    n = len(fhr)
    idx = np.flatnonzero(out)
    if idx.size < 2:
        return out
    level = fhr[idx[0]]
    k = 1
    while k < idx.size:
        i = idx[k]
        if abs(fhr[i] - level) <= jump_bpm:
            level = fhr[i]
            k += 1
            continue
        # look for a return to the pre-jump level within max_len samples
        back = None
        j = k + 1
        while j < idx.size and idx[j] <= min(i + max_len, n - 1):
            if abs(fhr[idx[j]] - level) <= jump_bpm:
                back = j
                break
            j += 1
        if back is None:
            level = fhr[i]
            k += 1
        else:
            out[idx[k:back]] = False
            level = fhr[idx[back]]
            k = back + 1
    return out


def detect_flat_uc(uc, valid, window=FLAT_WINDOW, std_threshold=FLAT_STD, max_mmhg=FLAT_MAX_MMHG):
    """Invalidate UC stretches that are numerically flat below ``max_mmhg``.

    Every trailing ``window``-sample window whose samples are all valid,
    all below ``max_mmhg`` and whose standard deviation is under
    ``std_threshold`` is invalidated in full.
    """
    uc = np.asarray(uc, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    out = valid.copy()
    if len(uc) < window:
        return out
    filled = np.where(valid, uc, 0.0)
    win = sliding_window_view(filled, window)
    all_valid = sliding_window_view(valid, window).all(axis=1)
    low = (win < max_mmhg).all(axis=1)
    flat = win.std(axis=1) < std_threshold
    starts = np.flatnonzero(all_valid & low & flat)
    if starts.size:
        cover = np.zeros(len(uc) + 1, dtype=np.int64)
        np.add.at(cover, starts, 1)
        np.add.at(cover, starts + window, -1)
        out &= np.cumsum(cover[:-1]) == 0
    return out


def interpolate_gaps(series, valid):
    """Fill invalid samples linearly between valid neighbours.

    Leading and trailing gaps take the nearest valid value.  Returns the
    filled series and the mask of filled samples.
    """
    series = np.asarray(series, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("cannot interpolate a series with no valid samples")
    filled = series.copy()
    missing = ~valid
    if missing.any():
        known = np.flatnonzero(valid)
        filled[missing] = np.interp(np.flatnonzero(missing), known, series[known])
    return filled, missing


def normalize_fhr(fhr):
    return np.clip(fhr, *FHR_CLIP) / FHR_SCALE


def normalize_uc(uc):
    return np.clip(uc, *UC_CLIP) / UC_SCALE


def normalize(rec) -> CleanRecording:
    """Attach normalized channels to a gap-filled recording.

    ``rec`` must already be interpolated; when it is a plain ``Recording``
    its values are taken as-is and nothing is marked synthetic.
    """
    if isinstance(rec, CleanRecording):
        fhr_syn, uc_syn = rec.fhr_synthetic, rec.uc_synthetic
    else:
        fhr_syn = uc_syn = np.zeros(len(rec), dtype=bool)
    return CleanRecording(
        rec.id, rec.fhr, rec.uc, rec.fhr_valid, rec.uc_valid,
        normalize_fhr(rec.fhr), normalize_uc(rec.uc), fhr_syn, uc_syn,
        rec.stage2_start_index)


def preprocess_pipeline(rec: Recording, jump_bpm=25.0) -> CleanRecording:
    fhr_valid = remove_implausible_fhr(rec.fhr, rec.fhr_valid)
    fhr_valid = remove_spikes(rec.fhr, fhr_valid, jump_bpm)
    uc_valid = detect_flat_uc(rec.uc, rec.uc_valid)
    channels = {}
    for name, values, valid in (("FHR", rec.fhr, fhr_valid), ("UC", rec.uc, uc_valid)):
        if not valid.any():
            raise ValueError(f"recording {rec.id}: {name} channel has no valid samples")
        channels[name] = interpolate_gaps(values, valid)
    (fhr, fhr_syn), (uc, uc_syn) = channels["FHR"], channels["UC"]
    return CleanRecording(rec.id, fhr, uc, fhr_valid, uc_valid,
                          normalize_fhr(fhr), normalize_uc(uc), fhr_syn, uc_syn,
                          rec.stage2_start_index)


def write_clean_csv(raw: Recording, clean: CleanRecording, path) -> None:
    """Raw columns as read, plus ``fhr_norm,uc_norm,synthetic``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_sec", "fhr_bpm", "uc_mmhg", "fhr_norm", "uc_norm", "synthetic"])
        syn = clean.synthetic_mask
        for i in range(len(clean)):
            w.writerow([f"{i / SAMPLE_RATE_HZ:.2f}",
                        f"{raw.fhr[i]:.4f}" if raw.fhr_valid[i] else "",
                        f"{raw.uc[i]:.4f}" if raw.uc_valid[i] else "",
                        repr(float(clean.fhr_norm[i])), repr(float(clean.uc_norm[i])),
                        int(syn[i])])


def load_clean(path, id=None) -> CleanRecording:
    """Load a recording CSV, cleaning it if it has no normalized columns.

    For files written by :func:`write_clean_csv` the stored normalized
    channels are used verbatim and the pipeline is only re-run to recover
    the filled physical values.
    """
    path = Path(path)
    raw = load_recording(path, id)
    clean = preprocess_pipeline(raw)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh))
    if "fhr_norm" not in header:
        return clean
    cols = {name: header.index(name) for name in ("fhr_norm", "uc_norm")}
    data = {k: [] for k in cols}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for line_no, row in enumerate(reader, start=2):
            try:
                for k, c in cols.items():
                    data[k].append(float(row[c]))
            except (ValueError, IndexError):
                raise ParseError(f"line {line_no}: bad normalized columns in {path}") from None
    return CleanRecording(clean.id, clean.fhr, clean.uc, clean.fhr_valid, clean.uc_valid,
                          np.asarray(data["fhr_norm"]), np.asarray(data["uc_norm"]),
                          clean.fhr_synthetic, clean.uc_synthetic, clean.stage2_start_index)
