"""Synthetic CTG recordings with contraction-coupled decelerations.

The generator exists to test the pipeline: FHR decelerations follow UC
contractions with a known lag, so a model that reads UC can predict where
FHR dips, and "compromised" recordings differ from "healthy" ones by
deeper, more frequent, later decelerations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import SAMPLE_RATE_HZ, ClinicalMetadata, Recording
from .preprocess import CleanRecording, preprocess_pipeline

CONTRACTION_WIDTH_S = 60.0
DECEL_WIDTH_S = 45.0
FHR_RANGE = (60.0, 200.0)
UC_RANGE = (5.0, 95.0)


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float = 1200.0
    baseline_bpm: float = 140.0
    variability_bpm: float = 5.0
    contraction_period_s: float = 180.0
    contraction_amp_mmhg: float = 60.0
    decel_depth_bpm: float = 30.0
    decel_lag_s: float = 20.0
    decel_prob: float = 0.5
    label_rule: str = "healthy"
    seed: int = 0
    uc_base_mmhg: float = 12.0
    flat_uc: tuple | None = None  # (start_s, length_s) of an injected flat UC stretch

    def __post_init__(self):
        if self.duration_s < 450:
            raise ValueError("duration_s must cover one 450 s context window")
        for name in ("baseline_bpm", "variability_bpm", "contraction_period_s",
                     "contraction_amp_mmhg", "decel_depth_bpm", "uc_base_mmhg"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.decel_prob <= 1.0:
            raise ValueError("decel_prob must be in [0, 1]")
        if self.label_rule not in ("healthy", "compromised"):
            raise ValueError("label_rule must be 'healthy' or 'compromised'")


@dataclass
class EventLog:
    contractions: list = field(default_factory=list)   # dicts: onset_s, peak_s, amp_mmhg
    decelerations: list = field(default_factory=list)  # dicts: onset_s, nadir_s, depth_bpm


def raised_cosine(t, start, width):
    """A 0..1..0 bump over ``[start, start + width]``, zero elsewhere."""
    x = (t - start) / width
    return np.where((x >= 0) & (x <= 1), 0.5 * (1.0 - np.cos(2.0 * np.pi * x)), 0.0)


def contraction_onsets(rng, cfg: SynthConfig):
    period = cfg.contraction_period_s
    onsets, t = [], rng.uniform(0.0, period)
    while t + CONTRACTION_WIDTH_S <= cfg.duration_s:
        onsets.append(t)
        t += period * (1.0 + rng.uniform(-0.1, 0.1))
    return onsets


def fhr_noise(rng, t, variability):
    """Three slow sinusoids (70% of the variance) plus white noise."""
    amp = np.sqrt(2.0 * 0.7 * variability ** 2 / 3.0)
    noise = rng.normal(0.0, np.sqrt(0.3) * variability, size=t.shape)
    for _ in range(3):
        freq = rng.uniform(1.0 / 60.0, 1.0 / 15.0)
        noise += amp * np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return noise


def generate_recording(cfg: SynthConfig):
    """Return ``(Recording, EventLog)``; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.duration_s * SAMPLE_RATE_HZ))
    t = np.arange(n) / SAMPLE_RATE_HZ
    log = EventLog()

    uc = cfg.uc_base_mmhg + rng.normal(0.0, 0.8, size=n)
    uc += 2.0 * np.sin(2 * np.pi * t / 97.0 + rng.uniform(0, 2 * np.pi))
    fhr = cfg.baseline_bpm + fhr_noise(rng, t, cfg.variability_bpm)
    for onset in contraction_onsets(rng, cfg):
        amp = cfg.contraction_amp_mmhg * rng.uniform(0.85, 1.0)
        uc += amp * raised_cosine(t, onset, CONTRACTION_WIDTH_S)
        log.contractions.append({"onset_s": onset, "peak_s": onset + CONTRACTION_WIDTH_S / 2,
                                 "amp_mmhg": amp})
        if rng.random() < cfg.decel_prob:
            start = onset + cfg.decel_lag_s
            if start + DECEL_WIDTH_S > cfg.duration_s:
                continue
            depth = cfg.decel_depth_bpm * rng.uniform(0.9, 1.1)
            fhr -= depth * raised_cosine(t, start, DECEL_WIDTH_S)
            log.decelerations.append({"onset_s": start, "nadir_s": start + DECEL_WIDTH_S / 2,
                                      "depth_bpm": depth})
    fhr = np.clip(fhr, *FHR_RANGE)
    uc = np.clip(uc, *UC_RANGE)
    if cfg.flat_uc is not None:
        start_s, length_s = cfg.flat_uc
        a = int(start_s * SAMPLE_RATE_HZ)
        uc[a:a + int(length_s * SAMPLE_RATE_HZ)] = min(cfg.uc_base_mmhg, 79.0)
    ones = np.ones(n, dtype=bool)
    return Recording(f"synth_{cfg.seed}", fhr, uc, ones, ones.copy()), log


def _profile(cfg: SynthConfig, compromised: bool, rng) -> SynthConfig:
    if compromised:
        return replace(cfg, label_rule="compromised", decel_prob=0.9,
                       decel_depth_bpm=rng.uniform(35.0, 45.0), decel_lag_s=rng.uniform(25.0, 35.0),
                       contraction_period_s=0.8 * cfg.contraction_period_s)
    return replace(cfg, label_rule="healthy", decel_prob=0.15,
                   decel_depth_bpm=rng.uniform(8.0, 15.0), decel_lag_s=rng.uniform(0.0, 10.0))


def _metadata(rid, compromised, rng):
    ph = rng.uniform(7.00, 7.14) if compromised else rng.uniform(7.16, 7.40)
    return ClinicalMetadata(
        id=rid, ph=round(float(ph), 3),
        delivery_type="cesarean" if rng.random() < 0.083 else "vaginal",
        presentation="other" if rng.random() < 0.096 else "cephalic",
        labor_arrest=bool(rng.random() < 0.10),
        induced=bool(rng.random() < 0.393),
        apgar1=int(rng.integers(5, 9)) if compromised else int(rng.integers(8, 11)),
        apgar5=int(rng.integers(7, 10)) if compromised else int(rng.integers(9, 11)),
        gestational_age_weeks=round(float(rng.normal(40.0, 1.1)), 1),
        birth_weight_g=round(float(rng.normal(3400.0, 455.0))),
    )


@dataclass(frozen=True, eq=False)
class SynthRecording:
    raw: Recording
    clean: CleanRecording
    meta: ClinicalMetadata
    positive: bool
    events: EventLog

    @property
    def id(self):
        return self.raw.id


def generate_corpus(n, healthy_fraction=0.8, template: SynthConfig | None = None, seed=0,
                    id_prefix="synth"):
    """``n`` labeled, preprocessed recordings.

    Exactly ``round(n * (1 - healthy_fraction))`` are compromised, at
    seeded random positions.  Each recording draws its own seed from
    ``(seed, index)``.
    """
    if n < 2:
        raise ValueError("corpus needs at least 2 recordings")
    if not 0.0 < healthy_fraction < 1.0:
        raise ValueError("healthy_fraction must be strictly between 0 and 1")
    template = template or SynthConfig()
    rng = np.random.default_rng([seed, 0x5EED])
    n_bad = int(round(n * (1.0 - healthy_fraction)))
    compromised = np.zeros(n, dtype=bool)
    compromised[rng.permutation(n)[:n_bad]] = True
    out = []
    for i in range(n):
        rec_rng = np.random.default_rng([seed, i])
        rec_seed = int(rec_rng.integers(2 ** 31))
        cfg = replace(_profile(template, bool(compromised[i]), rec_rng), seed=rec_seed)
        raw, events = generate_recording(cfg)
        rid = f"{id_prefix}_{i:04d}"
        raw = replace(raw, id=rid)
        clean = preprocess_pipeline(raw)
        out.append(SynthRecording(raw, clean, _metadata(rid, bool(compromised[i]), rec_rng),
                                  bool(compromised[i]), events))
    return out
