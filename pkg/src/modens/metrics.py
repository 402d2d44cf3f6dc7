"""FPR at 95% TPR, AUROC and the mode-subset evaluation protocol.

Threshold convention: a sample is called InD iff its score is strictly above
the threshold. The threshold is an order statistic of the InD scores, never
interpolated, so every reported number is reproducible exactly.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DataError
from .numkit import Rng

REPORT_COLUMNS = ("detector", "dataset", "k", "subset_id", "mode_ids", "fpr95", "auroc", "threshold")
AGGREGATE_COLUMNS = ("detector", "dataset", "k", "fpr95_mean", "fpr95_std", "auroc_mean", "auroc_std")


@dataclass
class DetectionReport:
    fpr95: float
    auroc: float
    threshold_used: float
    n_ind: int
    n_ood: int
    detector_id: str = ""
    mode_ids: tuple[str, ...] = ()
    dataset_id: str = ""
    k: int = 1
    subset_id: int = 0


def _scores(a, what):
    a = np.asarray(getattr(a, "scores", a), dtype=np.float64).ravel()
    if a.size == 0:
        raise DataError(f"empty {what} scores")
    return a


def fpr_at_tpr(ind_scores, ood_scores, tpr_target: float = 0.95) -> tuple[float, float]:
    """Return ``(fpr, threshold)``.

    The threshold is the ``ceil((1 - tpr) * n_ind)``-th smallest InD score,
    so at least ``tpr`` of the InD scores lie strictly above it.
    """
    ind = np.sort(_scores(ind_scores, "InD"))
    ood = _scores(ood_scores, "OoD")
    if not 0.0 < tpr_target < 1.0:
        raise DataError("tpr_target must lie in (0, 1)")
    m = max(1, math.ceil(round((1.0 - tpr_target) * ind.size, 9)))
    lam = float(ind[m - 1])
    return float((ood > lam).mean()), lam


def auroc(ind_scores, ood_scores) -> float:
    """Mann-Whitney AUROC with half credit for ties, via average ranks."""
    ind = _scores(ind_scores, "InD")
    ood = _scores(ood_scores, "OoD")
    ranks = rankdata(np.concatenate([ind, ood]))
    r_ind = ranks[: ind.size].sum()
    return float((r_ind - ind.size * (ind.size + 1) / 2.0) / (ind.size * ood.size))


def evaluate(ind, ood, tpr_target: float = 0.95, **provenance) -> DetectionReport:
    fpr, lam = fpr_at_tpr(ind, ood, tpr_target)
    a = _scores(ind, "InD")
    b = _scores(ood, "OoD")
    return DetectionReport(fpr, auroc(a, b), lam, a.size, b.size, **provenance)


def subset_protocol(all_mode_ids, k: int, repeats: int = 3, rng: Rng | None = None) -> list[tuple]:
    """Mode subsets for one ensemble size.

    ``k == 1`` enumerates every singleton; ``k == N`` gives the single full
    set. Otherwise ``repeats`` distinct random k-subsets (all of them when
    fewer exist), each kept in the original id order.
    """
    ids = list(all_mode_ids)
    n = len(ids)
    if not 1 <= k <= n:
        raise DataError(f"k={k} outside 1..{n}")
    if k == 1:
        return [(i,) for i in ids]
    if k == n:
        if repeats > 1:
            warnings.warn(f"k equals the number of modes; {repeats} repeats collapse to 1", stacklevel=2)
        return [tuple(ids)]
    if math.comb(n, k) <= repeats:
        return [tuple(c) for c in itertools.combinations(ids, k)]
    rng = rng if rng is not None else Rng(0)
    seen, out = set(), []
    while len(out) < repeats:
        pick = tuple(sorted(rng.permutation(n)[:k].tolist()))
        if pick not in seen:
            seen.add(pick)
            out.append(tuple(ids[i] for i in pick))
    return out


def aggregate(reports) -> list[dict]:
    """Mean and population std of fpr95/auroc per (detector, dataset, k)."""
    cells: dict[tuple, list[DetectionReport]] = {}
    for r in reports:
        cells.setdefault((r.detector_id, r.dataset_id, r.k), []).append(r)
    rows = []
    for (det, ds, k), group in cells.items():
        f = np.array([r.fpr95 for r in group])
        a = np.array([r.auroc for r in group])
        rows.append({
            "detector": det,
            "dataset": ds,
            "k": k,
            "fpr95_mean": float(f.mean()),
            "fpr95_std": float(f.std()),
            "auroc_mean": float(a.mean()),
            "auroc_std": float(a.std()),
        })
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def report_rows(reports) -> list[dict]:
    return [
        {
            "detector": r.detector_id,
            "dataset": r.dataset_id,
            "k": r.k,
            "subset_id": r.subset_id,
            "mode_ids": ";".join(r.mode_ids),
            "fpr95": r.fpr95,
            "auroc": r.auroc,
            "threshold": r.threshold_used,
        }
        for r in reports
    ]


def to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
