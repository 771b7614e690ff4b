"""
Multi-instance retrieval metrics over a soft relevance matrix.

Rankings sort candidates by descending score; equal scores keep ascending
candidate index. mAP binarises relevance at ``C > threshold``; nDCG uses the
raw relevance values as gains with a ``log2(rank + 1)`` discount over the
full candidate list.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from decimal import ROUND_DOWN, Decimal
from typing import Sequence

import numpy as np

from .errors import InputError
from .tensor import Tensor

REPORT_FIELDS = ("map_v2t", "map_t2v", "map_avg", "ndcg_v2t", "ndcg_t2v", "ndcg_avg")


@dataclass(frozen=True)
class RetrievalReport:
    map_v2t: float
    map_t2v: float
    map_avg: float
    ndcg_v2t: float
    ndcg_t2v: float
    ndcg_avg: float

    @classmethod
    def from_directions(cls, map_v2t, map_t2v, ndcg_v2t, ndcg_t2v) -> "RetrievalReport":
        return cls(map_v2t, map_t2v, (map_v2t + map_t2v) / 2,
                   ndcg_v2t, ndcg_t2v, (ndcg_v2t + ndcg_t2v) / 2)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def ranking(scores) -> np.ndarray:
    """Candidate indices by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def _paired(scores, other, what: str):
    scores = np.asarray(scores, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if scores.ndim != 1 or scores.shape != other.shape:
        raise InputError(f"scores and {what} must be 1-d of equal length, "
                         f"got {scores.shape} and {other.shape}")
    if scores.size == 0:
        raise InputError("need at least one candidate")
    return scores, other


def average_precision(scores: Sequence[float], rel: Sequence[float]) -> float:
    scores, rel = _paired(scores, rel, "rel")
    hits = rel[ranking(scores)] > 0
    n_rel = int(hits.sum())
    if n_rel == 0:
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_rel + 1) / ranks
    return float(precision_at_hits.sum() / n_rel)


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_row(scores: Sequence[float], gains: Sequence[float]) -> float:
    scores, gains = _paired(scores, gains, "gains")
    disc = _discounts(scores.size)
    # same contiguous layout for both sums, so an ideal ranking gives exactly 1
    idcg = float(np.ascontiguousarray(np.sort(gains)[::-1]) @ disc)
    if idcg == 0.0:
        return 0.0
    return float(np.ascontiguousarray(gains[ranking(scores)]) @ disc) / idcg


def _direction(S: np.ndarray, C: np.ndarray, threshold: float):
    aps = [average_precision(s, c > threshold) for s, c in zip(S, C)]
    ndcgs = [ndcg_row(s, c) for s, c in zip(S, C)]
    return float(np.mean(aps)), float(np.mean(ndcgs))


def evaluate(S, C, rel_threshold: float = 0.0) -> RetrievalReport:
    """V2T ranks each visual row over texts; T2V ranks each text column over clips."""
    S = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64)
    C = np.asarray(C.data if isinstance(C, Tensor) else C, dtype=np.float64)
    if S.ndim != 2 or S.shape != C.shape:
        raise InputError(f"score shape {S.shape} does not match relevance shape {C.shape}")
    if rel_threshold < 0:
        raise InputError(f"relevance threshold must be non-negative, got {rel_threshold}")
    map_v2t, ndcg_v2t = _direction(S, C, rel_threshold)
    map_t2v, ndcg_t2v = _direction(S.T, C.T, rel_threshold)
    return RetrievalReport.from_directions(map_v2t, map_t2v, ndcg_v2t, ndcg_t2v)


def truncate_percent(value: float, places: int = 2) -> str:
    """Format a [0, 1] fraction as a percentage, truncating extra digits."""
    pct = Decimal(repr(float(value))) * 100
    return str(pct.quantize(Decimal(1).scaleb(-places), rounding=ROUND_DOWN))


def format_report_tsv(report: RetrievalReport) -> str:
    return "\t".join(truncate_percent(getattr(report, k)) for k in REPORT_FIELDS)


def format_report_block(report: RetrievalReport) -> str:
    return "\n".join(f"{k}: {truncate_percent(getattr(report, k))}" for k in REPORT_FIELDS)
