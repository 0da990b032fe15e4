"""Dice similarity and the per-structure summary tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .phantom import STRUCTURE_NAMES

CSV_FIELDS = ("method", "structure", "n", "mean", "std", "median", "q1", "q3")


def dsc_counts(pred: np.ndarray, gt: np.ndarray, label: int) -> tuple[int, int]:
    """``(|P ∩ G|, |P| + |G|)`` for the pixels carrying ``label``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dsc: mask shapes differ ({pred.shape} vs {gt.shape})")
    p = pred == label
    g = gt == label
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)) + int(np.count_nonzero(g))


def dice_from_counts(inter: int, total: int) -> float:
    # both masks empty: the structure is correctly absent
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def dsc(pred: np.ndarray, gt: np.ndarray, label: int) -> float:
    return dice_from_counts(*dsc_counts(pred, gt, label))


@dataclass
class DSCStats:
    n: int
    mean: float
    std: float
    median: float
    q1: float
    q3: float
    values: tuple = ()

    @property
    def iqr(self) -> tuple[float, float]:
        return self.q1, self.q3

    @classmethod
    def from_summary(cls, mean: float, std: float, n: int = 0) -> "DSCStats":
        """Reference row known only by mean and standard deviation."""
        nan = float("nan")
        return cls(n=n, mean=mean, std=std, median=nan, q1=nan, q3=nan)


def aggregate(values: Sequence[float]) -> DSCStats:
    """Median, linear-interpolation quartiles, mean and population std."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate: need at least one case")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return DSCStats(n=int(v.size), mean=float(v.mean()), std=float(v.std(ddof=0)),
                    median=float(med), q1=float(q1), q3=float(q3), values=tuple(float(x) for x in v))


def per_case_dsc(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                 labels: Sequence[int] = (1, 2, 3, 4, 5)) -> dict[int, list[float]]:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    return {lab: [dsc(p, g, lab) for p, g in zip(preds, gts)] for lab in labels}


def format_cell(stats: DSCStats, digits: int = 2) -> str:
    return f"{stats.mean:.{digits}f} ± {stats.std:.{digits}f}"


def _check_structures(table: Mapping[str, Mapping[str, DSCStats]]) -> list[str]:
    if not table:
        raise ValueError("emit_table: no methods given")
    first = None
    for method, row in table.items():
        keys = list(row)
        unknown = [k for k in keys if k not in STRUCTURE_NAMES]
        if unknown:
            raise ValueError(f"emit_table: method {method!r} has unknown structures {unknown}")
        if first is None:
            first = set(keys)
        elif set(keys) != first:
            raise ValueError(f"emit_table: method {method!r} structures {sorted(keys)} differ from {sorted(first)}")
    return [s for s in STRUCTURE_NAMES if s in first]


def emit_table(table: Mapping[str, Mapping[str, DSCStats]], format: str = "text", digits: int = 2,
               dims: Mapping[str, str] | None = None) -> str:
    """Render one row per method, structures in the fixed column order.

    ``text`` gives mean ± std cells; ``csv`` gives the full statistics in the
    long ``method,structure,n,mean,std,median,q1,q3`` schema.
    """
    structures = _check_structures(table)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for method, row in table.items():
            for s in structures:
                st = row[s]
                w.writerow([method, s, st.n] + [repr(float(x)) for x in (st.mean, st.std, st.median, st.q1, st.q3)])
        return buf.getvalue()
    if format != "text":
        raise ValueError(f"emit_table: unknown format {format!r}")

    header = ["Method"] + (["2D/3D"] if dims else []) + structures
    rows = []
    for method, row in table.items():
        cells = [method] + ([dims.get(method, "")] if dims else []) + [format_cell(row[s], digits) for s in structures]
        rows.append(cells)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda cells: "| " + " | ".join(c.ljust(wd) for c, wd in zip(cells, widths)) + " |"  # noqa: E731
    rule = "|" + "|".join("-" * (wd + 2) for wd in widths) + "|"
    lines = ["# DSC mean ± population standard deviation", fmt(header), rule]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def read_stats_csv(text: str) -> dict[str, dict[str, DSCStats]]:
    """Inverse of ``emit_table(..., format="csv")``."""
    table: dict[str, dict[str, DSCStats]] = {}
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
        raise ValueError(f"stats CSV header must be {','.join(CSV_FIELDS)}, got {reader.fieldnames}")
    for rec in reader:
        table.setdefault(rec["method"], {})[rec["structure"]] = DSCStats(
            n=int(rec["n"]), mean=float(rec["mean"]), std=float(rec["std"]),
            median=float(rec["median"]), q1=float(rec["q1"]), q3=float(rec["q3"]))
    return table
