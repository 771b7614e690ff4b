"""
Test-time augmentation for (T, H, W, C) frame stacks.

Variants are produced scale-major, flip-minor: for each scale the rescaled
clip, then (optionally) its horizontal mirror. Their embeddings are averaged
and re-normalised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError
from .tensor import Tensor

DEFAULT_SCALES = (0.875, 1.0, 1.125)
POOL_MODES = ("embedding", "feature")


@dataclass
class TtaConfig:
    enable_flip: bool = True
    scales: Tuple[float, ...] = field(default=DEFAULT_SCALES)
    pool: str = "embedding"

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales:
            raise ContractError("TTA needs at least one scale")
        if any(s <= 0 for s in self.scales):
            raise InputError(f"scales must be positive, got {self.scales}")
        if self.pool not in POOL_MODES:
            raise ContractError(f"pool must be one of {POOL_MODES}, got {self.pool!r}")

    @property
    def n_variants(self) -> int:
        return len(self.scales) * (2 if self.enable_flip else 1)


def check_frames(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or min(x.shape) < 1:
        raise InputError(f"frame stack must be a non-empty (T, H, W, C) array, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("frame stack contains non-finite values")
    return x


def hflip(x) -> np.ndarray:
    """Mirror every frame left-right (reverse the width axis)."""
    return np.ascontiguousarray(check_frames(x)[:, :, ::-1, :])


def _resized_size(n: int, scale: float) -> int:
    return max(1, int(np.floor(n * scale + 0.5)))


def bilinear_taps(n_in: int, n_out: int):
    """Two-tap 1-d bilinear weights, half-pixel centres (align_corners=False).

    Returns ``(lo, hi, w_lo, w_hi)`` with ``out[i] = w_lo[i]*x[lo[i]] + w_hi[i]*x[hi[i]]``.
    Only the first half is computed; the second half is its exact mirror image,
    so resizing commutes bit for bit with a left-right flip.
    """
    ratio = n_in / n_out
    half = (n_out + 1) // 2
    src = np.maximum((np.arange(half) + 0.5) * ratio - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    w_hi = src - lo
    w_lo = 1.0 - w_hi
    m = n_out - half
    mirror = slice(m - 1, None, -1) if m else slice(0, 0)
    return (np.concatenate([lo, n_in - 1 - hi[mirror]]),
            np.concatenate([hi, n_in - 1 - lo[mirror]]),
            np.concatenate([w_lo, w_hi[mirror]]),
            np.concatenate([w_hi, w_lo[mirror]]))


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) dense form of ``bilinear_taps``."""
    lo, hi, w_lo, w_hi = bilinear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), w_lo)
    np.add.at(m, (rows, hi), w_hi)
    return m


def _resize_axis(x: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    lo, hi, w_lo, w_hi = bilinear_taps(x.shape[axis], n_out)
    shape = [1] * x.ndim
    shape[axis] = n_out
    return (w_lo.reshape(shape) * np.take(x, lo, axis=axis)
            + w_hi.reshape(shape) * np.take(x, hi, axis=axis))


def resize_bilinear(x, height: int, width: int) -> np.ndarray:
    x = check_frames(x)
    _, h, w, _ = x.shape
    if (height, width) == (h, w):
        return x.copy()
    return _resize_axis(_resize_axis(x, 1, height), 2, width)


def _fit_axis(x: np.ndarray, axis: int, target: int) -> np.ndarray:
    size = x.shape[axis]
    if size == target:
        return x
    if size > target:
        start = (size - target) // 2
        return np.take(x, np.arange(start, start + target), axis=axis)
    pad = [(0, 0)] * x.ndim
    before = (target - size) // 2
    pad[axis] = (before, target - size - before)
    return np.pad(x, pad)


def rescale_center_crop(x, scale: float) -> np.ndarray:
    """Bilinear rescale, then center-crop (or centred zero-pad) back to H x W."""
    if scale <= 0:
        raise InputError(f"scale must be positive, got {scale}")
    x = check_frames(x)
    _, h, w, _ = x.shape
    out = resize_bilinear(x, _resized_size(h, scale), _resized_size(w, scale))
    out = _fit_axis(out, 1, h)
    return np.ascontiguousarray(_fit_axis(out, 2, w))


def tta_variants(x, cfg: TtaConfig, diagnostics: bool = False) -> List[np.ndarray]:
    x = check_frames(x)
    variants = []
    for s in cfg.scales:
        v = rescale_center_crop(x, s)
        variants.append(v)
        if cfg.enable_flip:
            variants.append(hflip(v))
    if diagnostics and len(variants) != cfg.n_variants:
        raise AssertionError(f"expected {cfg.n_variants} variants, built {len(variants)}")
    return variants


def _mean_stack(items: List[Tensor]) -> Tensor:
    b, d = items[0].shape
    return T.mean(T.reshape(T.concat(items, axis=0), (len(items), b, d)), axis=0)


def pool_mean(items: List[Tensor], group: int = 1) -> Tensor:
    """Mean of (B, d) tensors, taken within consecutive groups first.

    With ``group=2`` (scale-major, flip-minor variants) each flip pair is
    averaged before the scales are, so a mirror-symmetric clip gives exactly
    the scales-only result. A single input passes through untouched.
    """
    if len(items) == 1:
        return items[0]
    if group > 1:
        if len(items) % group:
            raise ContractError(f"{len(items)} variants do not split into groups of {group}")
        items = [_mean_stack(items[i:i + group]) for i in range(0, len(items), group)]
        if len(items) == 1:
            return items[0]
    return _mean_stack(items)


def pool_embeddings(embs: List[Tensor], group: int = 1) -> Tensor:
    """Mean of (B, d) embeddings, re-normalised; a single input passes through."""
    if len(embs) == 1:
        return embs[0]
    return T.l2_normalize(pool_mean(embs, group))


def flip_group(cfg: TtaConfig) -> int:
    return 2 if cfg.enable_flip else 1


def tta_encode(x, encoder: Callable[[np.ndarray], Tensor],
               proj: Callable[[Tensor], Tensor], cfg: TtaConfig,
               diagnostics: bool = False) -> Tensor:
    """Encode every variant of one clip and pool into a single (1, d) embedding.

    ``encoder`` maps a (T, H, W, C) clip to a (1, D) feature and ``proj`` maps
    features to unit-norm embeddings. With ``cfg.pool == "feature"`` the encoder
    outputs are averaged before a single projection instead.
    """
    variants = tta_variants(x, cfg, diagnostics)
    feats = [encoder(v) for v in variants]
    if cfg.pool == "feature":
        return proj(pool_mean(feats, flip_group(cfg)))
    return pool_embeddings([proj(f) for f in feats], flip_group(cfg))
