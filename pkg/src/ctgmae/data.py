"""Recordings, clinical metadata, acidemia labels and reproducible splits."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

SAMPLE_RATE_HZ = 4
ACIDEMIA_PH = 7.15
SPLIT_NAMES = ("train", "validation", "test")

# CTU-UHB benchmark split of 552 recordings: split -> (n, acidemia cases)
BENCHMARK_SIZES = {"train": (441, 90), "validation": (56, 12), "test": (55, 11)}


class ParseError(ValueError):
    """Raised when a recording or metadata file is malformed."""


@dataclass(frozen=True, eq=False)
class Recording:
    """Paired FHR/UC series sampled at 4 Hz with per-sample validity."""

    id: str
    fhr: np.ndarray
    uc: np.ndarray
    fhr_valid: np.ndarray
    uc_valid: np.ndarray
    stage2_start_index: int | None = None
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        n = len(self.fhr)
        if not (len(self.uc) == len(self.fhr_valid) == len(self.uc_valid) == n):
            raise ValueError(f"recording {self.id}: channel lengths differ")
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise ValueError("only 4 Hz recordings are supported")
        if self.stage2_start_index is not None and not 0 <= self.stage2_start_index < n:
            raise ValueError(f"recording {self.id}: stage2_start_index out of range")

    def __len__(self):
        return len(self.fhr)

    @classmethod
    def from_arrays(cls, id, fhr, uc, stage2_start_index=None):
        """Build a recording, treating NaN (and 0 for FHR) as missing."""
        fhr = np.asarray(fhr, dtype=np.float64)
        uc = np.asarray(uc, dtype=np.float64)
        return cls(id, fhr, uc, np.isfinite(fhr) & (fhr != 0), np.isfinite(uc),
                   stage2_start_index)


def _parse_cell(text, line_no, column):
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {line_no}: cannot parse {column} value {text!r}") from None


def load_recording(path, id=None) -> Recording:
    """Read a ``t_sec,fhr_bpm,uc_mmhg`` CSV file.

    Empty cells and ``nan`` are missing; an FHR of exactly 0 is also
    missing.  Extra columns after the first three are ignored.
    """
    path = Path(path)
    times, fhr, uc = [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["t_sec", "fhr_bpm", "uc_mmhg"]:
            raise ParseError(f"line 1: expected header t_sec,fhr_bpm,uc_mmhg in {path}")
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"line {line_no}: expected {width} columns, got {len(row)}")
            t = _parse_cell(row[0], line_no, "t_sec")
            if math.isnan(t):
                raise ParseError(f"line {line_no}: missing time value")
            if times and t <= times[-1]:
                raise ParseError(f"line {line_no}: time column is not increasing")
            times.append(t)
            fhr.append(_parse_cell(row[1], line_no, "fhr_bpm"))
            uc.append(_parse_cell(row[2], line_no, "uc_mmhg"))
    return Recording.from_arrays(id or path.stem, fhr, uc)


def write_recording(rec: Recording, path) -> None:
    """Write ``rec`` in the recording CSV format; invalid samples become blank."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_sec", "fhr_bpm", "uc_mmhg"])
        for i in range(len(rec)):
            w.writerow([f"{i / SAMPLE_RATE_HZ:.2f}",
                        f"{rec.fhr[i]:.4f}" if rec.fhr_valid[i] else "",
                        f"{rec.uc[i]:.4f}" if rec.uc_valid[i] else ""])


@dataclass(frozen=True)
class ClinicalMetadata:
    id: str
    ph: float | None
    delivery_type: str = "vaginal"
    presentation: str = "cephalic"
    labor_arrest: bool = False
    induced: bool = False
    apgar1: int = 9
    apgar5: int = 9
    gestational_age_weeks: float = 40.0
    birth_weight_g: float = 3400.0
    stage2_duration_s: float | None = None

    def __post_init__(self):
        if self.ph is not None and not 6.5 <= self.ph <= 7.6:
            raise ValueError(f"{self.id}: pH {self.ph} outside [6.5, 7.6]")
        if self.delivery_type not in ("vaginal", "cesarean"):
            raise ValueError(f"{self.id}: unknown delivery_type {self.delivery_type!r}")
        if self.presentation not in ("cephalic", "other"):
            raise ValueError(f"{self.id}: unknown presentation {self.presentation!r}")
        for score in (self.apgar1, self.apgar5):
            if not 0 <= score <= 10:
                raise ValueError(f"{self.id}: Apgar score {score} outside [0, 10]")


def load_metadata(path) -> list[ClinicalMetadata]:
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(rows, list):
        raise ParseError(f"{path}: expected a JSON array of metadata objects")
    known = {f.name for f in fields(ClinicalMetadata)}
    metas, seen = [], set()
    for i, row in enumerate(rows):
        unknown = set(row) - known
        if unknown:
            raise ParseError(f"{path}: entry {i} has unknown fields {sorted(unknown)}")
        meta = ClinicalMetadata(**row)
        if meta.id in seen:
            raise ParseError(f"{path}: duplicate id {meta.id!r}")
        seen.add(meta.id)
        metas.append(meta)
    return metas


def save_metadata(metas, path) -> None:
    Path(path).write_text(json.dumps([asdict(m) for m in metas], indent=1))


@dataclass(frozen=True)
class Label:
    id: str
    positive: bool


def acidemia_label(meta: ClinicalMetadata) -> Label:
    if meta.ph is None:
        raise ValueError(f"{meta.id}: no umbilical pH recorded")
    return Label(meta.id, meta.ph < ACIDEMIA_PH)


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict
    seed: int

    def ids(self, split):
        return [i for i, s in self.assignment.items() if s == split]

    def to_json(self) -> str:
        return json.dumps({**self.assignment, "seed": self.seed}, indent=1)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        if "seed" not in raw:
            raise ParseError("split file lacks a seed field")
        seed = raw.pop("seed")
        bad = {v for v in raw.values() if v not in SPLIT_NAMES}
        if bad:
            raise ParseError(f"unknown split names {sorted(bad)}")
        return cls(raw, int(seed))


def stratified_split(labels, sizes, seed) -> SplitAssignment:
    """Assign labels to splits with exact per-split totals and positives.

    ``sizes`` maps split name to ``(n, n_positive)``.  Positives and
    negatives are shuffled separately with a seeded generator and dealt
    out in the order the splits are listed.
    """
    labels = list(labels)
    pos = [lab.id for lab in labels if lab.positive]
    neg = [lab.id for lab in labels if not lab.positive]
    if sum(n for n, _ in sizes.values()) != len(labels):
        raise ValueError("split sizes do not add up to the number of labels")
    want_pos = sum(p for _, p in sizes.values())
    if want_pos != len(pos):
        raise ValueError(f"split sizes ask for {want_pos} positives but {len(pos)} exist")
    for name, (n, p) in sizes.items():
        if not 0 <= p <= n:
            raise ValueError(f"split {name}: infeasible counts n={n}, positives={p}")
    rng = np.random.default_rng(seed)
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    assignment, ip, ineg = {}, 0, 0
    for name, (n, p) in sizes.items():
        for rid in pos[ip:ip + p]:
            assignment[rid] = name
        for rid in neg[ineg:ineg + n - p]:
            assignment[rid] = name
        ip += p
        ineg += n - p
    order = {lab.id: k for k, lab in enumerate(labels)}
    assignment = dict(sorted(assignment.items(), key=lambda kv: order[kv[0]]))
    return SplitAssignment(assignment, seed)


def proportional_sizes(labels, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Per-split (n, positives) quotas proportional to ``fractions``.

    The train split absorbs rounding remainders.
    """
    labels = list(labels)
    n, n_pos = len(labels), sum(lab.positive for lab in labels)
    sizes = {}
    for name, frac in zip(SPLIT_NAMES[1:], fractions[1:]):
        size = int(round(n * frac))
        sizes[name] = (size, int(round(size * n_pos / n)) if n else 0)
    rest_n = n - sum(s for s, _ in sizes.values())
    rest_p = n_pos - sum(p for _, p in sizes.values())
    return {"train": (rest_n, rest_p), **sizes}


SUBGROUP_CRITERIA = {
    "vaginal": lambda m: m.delivery_type == "vaginal",
    "cephalic": lambda m: m.presentation == "cephalic",
    "no_arrest": lambda m: not m.labor_arrest,
}


def filter_subgroup(metas, criteria=()) -> list[str]:
    """Ids whose metadata satisfies every named criterion, in input order."""
    unknown = [c for c in criteria if c not in SUBGROUP_CRITERIA]
    if unknown:
        raise ValueError(f"unknown subgroup criteria {unknown}; known: {sorted(SUBGROUP_CRITERIA)}")
    preds = [SUBGROUP_CRITERIA[c] for c in criteria]
    return [m.id for m in metas if all(p(m) for p in preds)]
