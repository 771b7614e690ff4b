"""
Full dual-encoder model: encoders -> (optional) CMCR -> projection heads.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .cmcr import ROUTINGS, CmcrParams, refine, route
from .errors import ConfigurationError, InputError
from .nn import (EncoderParams, ProjectionParams, encode_text_batch, encode_visual_batch,
                 init_text_encoder, init_visual_encoder, named_parameters, project_embed)
from .tensor import Tensor
from .tta import TtaConfig, flip_group, pool_embeddings, pool_mean, tta_variants

PAIRINGS = ("paired", "all_pairs")


@dataclass
class ModelConfig:
    frames: int = 2
    height: int = 16
    width: int = 16
    channels: int = 3
    patch: int = 8
    vocab: int = 20
    max_len: int = 6
    width_v: int = 32
    width_t: int = 32
    enc_layers: int = 2
    enc_heads: int = 4
    attn_dim: int = 512
    attn_heads: int = 8
    proj_hidden: int = 64
    embed_dim: int = 32
    dropout: float = 0.1
    use_cmcr: bool = True
    routing: str = "default"
    bos_id: int = 0
    eos_id: int = 1

    def __post_init__(self):
        if self.routing not in ROUTINGS:
            raise ConfigurationError(f"routing must be one of {ROUTINGS}, got {self.routing!r}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigurationError("frame size must be divisible by the patch size")
        if self.enc_layers < 1:
            raise ConfigurationError("encoders need at least one layer")
        if self.attn_dim % self.attn_heads:
            raise ConfigurationError("attn_dim must be divisible by attn_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    def head_inputs(self) -> Tuple[int, int]:
        """Input widths of the (visual, text) projection heads."""
        if not self.use_cmcr:
            return self.width_v, self.width_t
        # text-queried refinement keeps the text width, and vice versa
        refined = (self.width_t, self.width_v)
        return refined if self.routing == "default" else refined[::-1]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CRClipParams:
    visual: EncoderParams
    text: EncoderParams
    visual_head: ProjectionParams
    text_head: ProjectionParams
    cmcr: Optional[CmcrParams] = None


def init_model(cfg: ModelConfig, seed: int) -> CRClipParams:
    rng = np.random.default_rng(seed)
    visual = init_visual_encoder(rng, cfg.frames, cfg.height, cfg.width, cfg.channels,
                                 cfg.patch, cfg.width_v, cfg.enc_layers, cfg.enc_heads,
                                 cfg.dropout)
    text = init_text_encoder(rng, cfg.vocab, cfg.max_len, cfg.width_t, cfg.enc_layers,
                             cfg.enc_heads, cfg.dropout, cfg.bos_id, cfg.eos_id)
    cmcr = None
    if cfg.use_cmcr:
        cmcr = CmcrParams.init(rng, cfg.width_v, cfg.width_t, cfg.attn_dim, cfg.attn_heads,
                               cfg.dropout)
    d_vis, d_txt = cfg.head_inputs()
    return CRClipParams(
        visual=visual, text=text,
        visual_head=ProjectionParams.init(rng, d_vis, cfg.proj_hidden, cfg.embed_dim),
        text_head=ProjectionParams.init(rng, d_txt, cfg.proj_hidden, cfg.embed_dim),
        cmcr=cmcr,
    )


def state_dict(params: CRClipParams) -> Dict[str, Tensor]:
    return dict(named_parameters(params))


def load_state(params: CRClipParams, arrays: Dict[str, np.ndarray]) -> CRClipParams:
    """Copy arrays into ``params`` in place; names and shapes must match exactly."""
    from .formats import KeyMismatchError

    named = state_dict(params)
    if set(named) != set(arrays):
        raise KeyMismatchError(set(named) - set(arrays), set(arrays) - set(named))
    for name, t in named.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != t.shape:
            raise ConfigurationError(f"{name}: checkpoint shape {arr.shape} != model {t.shape}")
        t.data = arr.copy()
        t.zero_grad()
    return params


def encode(params: CRClipParams, clips, captions, training: bool = False, rng=None):
    """Raw encoder features (F_v, F_t)."""
    f_v = encode_visual_batch(clips, params.visual, training, rng)
    f_t = encode_text_batch(captions, params.text, training, rng)
    return f_v, f_t


def head_inputs(params: CRClipParams, cfg: ModelConfig, f_v: Tensor, f_t: Tensor,
                training: bool = False, rng=None):
    if not cfg.use_cmcr:
        return f_v, f_t
    return route(*refine(f_v, f_t, params.cmcr, training, rng), cfg.routing)


def embed_features(params: CRClipParams, cfg: ModelConfig, f_v: Tensor, f_t: Tensor,
                   training: bool = False, rng=None):
    x_v, x_t = head_inputs(params, cfg, f_v, f_t, training, rng)
    return project_embed(x_v, params.visual_head), project_embed(x_t, params.text_head)


def forward(params: CRClipParams, cfg: ModelConfig, clips, captions, training: bool = False,
            rng=None):
    """Unit-norm (visual, text) embeddings for index-paired clips and captions."""
    if len(clips) != len(captions):
        raise InputError(f"{len(clips)} clips vs {len(captions)} captions; batches are paired")
    f_v, f_t = encode(params, clips, captions, training, rng)
    return embed_features(params, cfg, f_v, f_t, training, rng)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def encode_clips(params: CRClipParams, clips, chunk: int = 64) -> Tensor:
    with T.no_grad():
        return T.concat([encode_visual_batch(clips[sl], params.visual)
                         for sl in _chunks(len(clips), chunk)], axis=0)


def encode_captions(params: CRClipParams, captions, chunk: int = 64) -> Tensor:
    with T.no_grad():
        return T.concat([encode_text_batch(captions[sl], params.text)
                         for sl in _chunks(len(captions), chunk)], axis=0)


def encode_dataset(params: CRClipParams, clips, captions, chunk: int = 64):
    """Eval-mode encoder features (F_v, F_t) for a whole dataset."""
    return encode_clips(params, clips, chunk), encode_captions(params, captions, chunk)


def score_matrix(params: CRClipParams, cfg: ModelConfig, f_v: Tensor, f_t: Tensor,
                 pairing: str = "paired") -> np.ndarray:
    """Similarity matrix from encoder features.

    ``paired`` refines row i of each modality together (the training contract)
    and scores embeddings by inner product. ``all_pairs`` refines every
    (clip, caption) combination separately, which never lets the index pairing
    leak into the scores.
    """
    if pairing not in PAIRINGS:
        raise ConfigurationError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    with T.no_grad():
        if pairing == "paired" or not cfg.use_cmcr:
            v, t = embed_features(params, cfg, f_v, f_t)
            return v.data @ t.data.T
        n_v, n_t = f_v.shape[0], f_t.shape[0]
        rows = []
        for i in range(n_v):
            fv_rep = Tensor(np.repeat(f_v.data[i:i + 1], n_t, axis=0))
            v, t = embed_features(params, cfg, fv_rep, f_t)
            rows.append((v.data * t.data).sum(axis=1))
        return np.stack(rows)


def embed_dataset(params: CRClipParams, cfg: ModelConfig, clips, captions,
                  chunk: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    f_v, f_t = encode_dataset(params, clips, captions, chunk)
    with T.no_grad():
        v, t = embed_features(params, cfg, f_v, f_t)
    return v.data, t.data


def tta_embed_dataset(params: CRClipParams, cfg: ModelConfig, clips, captions,
                      tta: TtaConfig, chunk: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Pool embeddings over the TTA variants of every clip.

    With CMCR the text embedding also depends on its paired clip, so text
    embeddings are pooled over the same variants.
    """
    per_clip = [tta_variants(c, tta, diagnostics=True) for c in clips]
    variant_sets = [np.stack([vs[k] for vs in per_clip]) for k in range(tta.n_variants)]
    f_t = encode_captions(params, captions, chunk)
    feats = [encode_clips(params, vs, chunk) for vs in variant_sets]
    group = flip_group(tta)
    with T.no_grad():
        if tta.pool == "feature":
            v, t = embed_features(params, cfg, pool_mean(feats, group), f_t)
            return v.data, t.data
        pairs = [embed_features(params, cfg, f, f_t) for f in feats]
        v = pool_embeddings([p[0] for p in pairs], group)
        # without CMCR the text side never sees the clip variants
        t = pool_embeddings([p[1] for p in pairs], group) if cfg.use_cmcr else pairs[0][1]
    return v.data, t.data
