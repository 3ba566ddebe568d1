"""AUC, accuracy and the subgroup evaluation table."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import acidemia_label, filter_subgroup

# row name -> subgroup criteria, in report order
SUBGROUPS = (
    ("All test cases", ()),
    ("Vaginal delivery", ("vaginal",)),
    ("Cephalic presentation", ("cephalic",)),
    ("Vaginal + Cephalic", ("vaginal", "cephalic")),
    ("No labor arrest", ("no_arrest",)),
    ("Vaginal + Cephalic + No arrest", ("vaginal", "cephalic", "no_arrest")),
)


def auc(labels, scores) -> float:
    """Mann-Whitney AUC via average ranks; ties count one half."""
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(labels, scores, threshold=0.5) -> float:
    y = np.asarray(labels, dtype=bool)
    if y.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean((np.asarray(scores) > threshold) == y))


@dataclass(frozen=True)
class ReportRow:
    subgroup: str
    n: int
    positives: int
    prevalence: float
    auc: float | None
    accuracy: float | None


@dataclass(frozen=True)
class EvalReport:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subgroup", "n", "acidemia", "prevalence", "auc", "accuracy"])
        for r in self.rows:
            w.writerow([r.subgroup, r.n, r.positives, f"{r.prevalence:.4f}",
                        "" if r.auc is None else f"{r.auc:.4f}",
                        "" if r.accuracy is None else f"{r.accuracy:.4f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ("Subgroup", "N", "Acidemia", "Prevalence", "AUC", "Accuracy")
        body = [(r.subgroup, str(r.n), str(r.positives), f"{100 * r.prevalence:.1f}%",
                 "n/a" if r.auc is None else f"{r.auc:.3f}",
                 "n/a" if r.accuracy is None else f"{r.accuracy:.3f}") for r in self.rows]
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                    for i, (c, w) in enumerate(zip(row, widths)))
        return "\n".join([fmt(head), "  ".join("-" * w for w in widths), *map(fmt, body)]) + "\n"


def evaluate_subgroups(scores: dict, metas, threshold=0.5) -> EvalReport:
    """One row per standard subgroup of ``metas``.

    ``scores`` maps recording id to a probability.  Subgroups with a
    single class get ``auc=None``; an empty subgroup gets both metrics
    ``None``.
    """
    by_id = {m.id: m for m in metas}
    rows = []
    for name, criteria in SUBGROUPS:
        ids = filter_subgroup(metas, criteria)
        missing = [i for i in ids if i not in scores]
        if missing:
            raise KeyError(f"subgroup {name!r}: no score for {missing[:5]}")
        y = np.array([acidemia_label(by_id[i]).positive for i in ids], dtype=bool)
        s = np.array([scores[i] for i in ids], dtype=np.float64)
        n, pos = len(ids), int(y.sum())
        both = 0 < pos < n
        rows.append(ReportRow(name, n, pos, pos / n if n else math.nan,
                              auc(y, s) if both else None,
                              accuracy(y, s, threshold) if n else None))
    return EvalReport(rows)
