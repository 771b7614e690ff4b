"""
Definition-level reference implementations.

These deliberately avoid the vectorised code paths they check: ranks come
from pairwise comparisons, sums are explicit Python loops, interpolation is
done one output pixel at a time.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def rank_of(scores: Sequence[float], c: int) -> int:
    """1-based rank of candidate c: higher scores first, ties by lower index."""
    s = scores[c]
    return 1 + sum(1 for d, t in enumerate(scores) if t > s or (t == s and d < c))


def average_precision(scores, rel) -> float:
    scores = [float(s) for s in scores]
    relevant = [c for c, r in enumerate(rel) if r]
    if not relevant:
        return 0.0
    ranks = {c: rank_of(scores, c) for c in range(len(scores))}
    total = 0.0
    for c in relevant:
        r = ranks[c]
        hits_above = sum(1 for d in relevant if ranks[d] <= r)
        total += hits_above / r
    return total / len(relevant)


def ndcg(scores, gains) -> float:
    scores = [float(s) for s in scores]
    gains = [float(g) for g in gains]
    dcg = sum(g / math.log2(rank_of(scores, c) + 1) for c, g in enumerate(gains))
    # ideal: rank candidates by their own gain
    idcg = sum(g / math.log2(rank_of(gains, c) + 1) for c, g in enumerate(gains))
    return 0.0 if idcg == 0.0 else dcg / idcg


def evaluate(S, C, threshold: float = 0.0) -> dict:
    S = np.asarray(S, dtype=float)
    C = np.asarray(C, dtype=float)
    nv, nt = S.shape
    ap_v = [average_precision(S[i], [C[i, j] > threshold for j in range(nt)]) for i in range(nv)]
    ap_t = [average_precision(S[:, j], [C[i, j] > threshold for i in range(nv)]) for j in range(nt)]
    nd_v = [ndcg(S[i], C[i]) for i in range(nv)]
    nd_t = [ndcg(S[:, j], C[:, j]) for j in range(nt)]
    out = {
        "map_v2t": sum(ap_v) / nv, "map_t2v": sum(ap_t) / nt,
        "ndcg_v2t": sum(nd_v) / nv, "ndcg_t2v": sum(nd_t) / nt,
    }
    out["map_avg"] = (out["map_v2t"] + out["map_t2v"]) / 2
    out["ndcg_avg"] = (out["ndcg_v2t"] + out["ndcg_t2v"]) / 2
    return out


def sms_direction(S, C, tau: float, gamma: float) -> float:
    n_anchor, n_cand = len(S), len(S[0])
    total, count = 0.0, 0
    for i in range(n_anchor):
        for j in range(n_cand):
            for k in range(n_cand):
                gap = C[i][j] - C[i][k]
                if gap > tau:
                    total += gap * math.log1p(math.exp(gamma * (S[i][k] - S[i][j])))
                    count += 1
    return total / count if count else 0.0


def sms_loss(S, C, tau: float, gamma: float) -> float:
    S = np.asarray(S, dtype=float)
    C = np.asarray(C, dtype=float)
    return (sms_direction(S.tolist(), C.tolist(), tau, gamma)
            + sms_direction(S.T.tolist(), C.T.tolist(), tau, gamma))


def mimm_loss(S, margin: float) -> float:
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if j != i:
                total += max(0.0, margin - S[i, i] + S[i, j])
                total += max(0.0, margin - S[i, i] + S[j, i])
    return total / n


def bilinear_pixel(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of one (H, W) plane, pixel by pixel."""
    in_h, in_w = img.shape
    out = np.empty((out_h, out_w))
    for a in range(out_h):
        y = max((a + 0.5) * in_h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(y)), in_h - 1)
        y1 = min(y0 + 1, in_h - 1)
        wy = y - y0
        for b in range(out_w):
            x = max((b + 0.5) * in_w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(x)), in_w - 1)
            x1 = min(x0 + 1, in_w - 1)
            wx = x - x0
            top = (1 - wx) * img[y0, x0] + wx * img[y0, x1]
            bottom = (1 - wx) * img[y1, x0] + wx * img[y1, x1]
            out[a, b] = (1 - wy) * top + wy * bottom
    return out
