"""
Training objectives over a soft relevance matrix.

``sms_loss`` weights every in-batch triplet (anchor i, candidates j, k) by its
relevance gap ``C[i, j] - C[i, k]``, drops triplets whose gap does not exceed
the relaxation factor ``tau``, and applies a logistic soft margin on the
similarity difference. It is evaluated in both retrieval directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class SmsConfig:
    tau: float = 0.05
    gamma: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ContractError(f"tau must lie in [0, 1), got {self.tau}")
        if self.gamma <= 0:
            raise ContractError(f"gamma must be positive, got {self.gamma}")


def check_relevance(C) -> np.ndarray:
    """Return ``C`` as a float64 matrix after checking entries lie in [0, 1]."""
    C = np.asarray(C.data if isinstance(C, Tensor) else C, dtype=np.float64)
    if C.ndim != 2:
        raise InputError(f"relevance matrix must be 2-d, got shape {C.shape}")
    if not np.all((C >= 0.0) & (C <= 1.0)):
        raise InputError("relevance entries must lie in [0, 1]")
    return C


def relevance_gap(C, i: int, j: int, k: int) -> float:
    C = np.asarray(C.data if isinstance(C, Tensor) else C)
    rows, cols = C.shape
    if not (0 <= i < rows and 0 <= j < cols and 0 <= k < cols):
        raise InputError(f"indices ({i}, {j}, {k}) out of range for relevance shape {C.shape}")
    return float(C[i, j] - C[i, k])


def _directional_sms(S: Tensor, C: np.ndarray, cfg: SmsConfig) -> Tensor:
    n_anchor, n_cand = S.shape
    gaps = C[:, :, None] - C[:, None, :]           # [i, j, k] = C_ij - C_ik
    weights = np.where(gaps > cfg.tau, gaps, 0.0)
    count = int(np.count_nonzero(gaps > cfg.tau))
    margin = T.sub(T.reshape(S, (n_anchor, 1, n_cand)),
                   T.reshape(S, (n_anchor, n_cand, 1)))  # [i, j, k] = S_ik - S_ij
    soft = T.log1p(T.exp(T.scale(margin, cfg.gamma)))
    total = T.sum(T.mul(soft, weights))
    return T.scale(total, 1.0 / max(count, 1))


def sms_loss(S: Tensor, C, cfg: SmsConfig = SmsConfig()) -> Tensor:
    """Symmetric multi-similarity loss, visual->text plus text->visual."""
    C = check_relevance(C)
    if S.shape != C.shape:
        raise InputError(f"similarity shape {S.shape} differs from relevance shape {C.shape}")
    v2t = _directional_sms(S, C, cfg)
    t2v = _directional_sms(T.transpose(S, (1, 0)), np.ascontiguousarray(C.T), cfg)
    return T.add(v2t, t2v)


def mimm_loss(S: Tensor, margin: float = 0.2) -> Tensor:
    """Bidirectional max-margin ranking loss over a paired square batch."""
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InputError(f"mimm_loss needs a square similarity matrix, got {S.shape}")
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    n = S.shape[0]
    eye = np.eye(n)
    off = 1.0 - eye
    diag = T.sum(T.mul(S, eye), axis=1, keepdims=True)          # (n, 1): S_ii
    shifted = T.add(T.scale(diag, -1.0), margin)                 # margin - S_ii
    rows = T.relu(T.add(shifted, S))                             # margin - S_ii + S_ij
    cols = T.relu(T.add(shifted, T.transpose(S, (1, 0))))        # margin - S_ii + S_ji
    total = T.sum(T.mul(T.add(rows, cols), off))
    return T.scale(total, 1.0 / n)


def similarity_matrix(V: Tensor, Tx: Tensor) -> Tensor:
    """Cosine similarities between unit-norm visual and text embeddings."""
    if V.ndim != 2 or Tx.ndim != 2 or V.shape[1] != Tx.shape[1]:
        raise InputError(f"similarity_matrix: shapes {V.shape} and {Tx.shape} do not align")
    return T.matmul(V, T.transpose(Tx, (1, 0)))
