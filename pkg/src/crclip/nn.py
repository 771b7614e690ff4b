"""
Reusable blocks: multi-head (cross-)attention, gated FFN, projection heads
and the small transformer encoders standing in for the CLIP towers.

Parameters live in plain dataclasses of ``Tensor`` leaves; every block is a
function of ``(inputs, params, training, rng)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InputError
from .tensor import Tensor

INIT_STD = 0.02


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def const_param(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple]:
    """Yield ``(dotted_name, Tensor)`` for every tensor inside a params tree."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            yield from named_parameters(child, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_parameters(child, f"{prefix}.{i}" if prefix else str(i))


def parameters(obj) -> List[Tensor]:
    return [t for _, t in named_parameters(obj)]


# ---------------------------------------------------------------------------
# Multi-head attention
# ---------------------------------------------------------------------------

@dataclass
class MhaParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int
    dropout_rate: float = 0.1

    def __post_init__(self):
        d_a = self.w_q.shape[1]
        if self.heads <= 0 or d_a % self.heads:
            raise ConfigurationError(
                f"attention width {d_a} is not divisible by {self.heads} heads")
        if self.w_k.shape[1] != d_a or self.w_v.shape[1] != d_a or self.w_o.shape[0] != d_a:
            raise ConfigurationError(
                "inconsistent attention shapes: "
                f"w_q {self.w_q.shape}, w_k {self.w_k.shape}, "
                f"w_v {self.w_v.shape}, w_o {self.w_o.shape}")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise ConfigurationError("w_k and w_v must read the same key/value width")

    @property
    def attn_dim(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, rng, d_q_in: int, d_kv_in: int, d_attn: int, d_out: int,
             heads: int, dropout_rate: float = 0.1) -> "MhaParams":
        return cls(
            w_q=normal_param(rng, (d_q_in, d_attn)),
            w_k=normal_param(rng, (d_kv_in, d_attn)),
            w_v=normal_param(rng, (d_kv_in, d_attn)),
            w_o=normal_param(rng, (d_attn, d_out)),
            heads=heads,
            dropout_rate=dropout_rate,
        )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (B, N, D_a) -> (B, h, N, D_a / h)
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, dropout_rate: float,
           training: bool, rng) -> Tensor:
    """Scaled dot-product attention over already-projected (B, N, D_a) tensors."""
    b, n_q, d_a = q.shape
    head_dim = d_a // heads
    qh = _split_heads(q, heads)
    kt = T.transpose(T.reshape(k, (b, k.shape[1], heads, head_dim)), (0, 2, 3, 1))
    vh = _split_heads(v, heads)
    scores = T.scale(T.matmul(qh, kt), 1.0 / math.sqrt(head_dim))
    weights = T.dropout(T.softmax(scores, axis=-1), dropout_rate, training, rng)
    ctx = T.matmul(weights, vh)
    return T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n_q, d_a))


def _check_input(name: str, x: Tensor, width: int) -> None:
    if x.shape[-1] != width:
        raise DimensionError(f"{name}: expected feature width {width}, got shape {x.shape}")


def cross_attention(query_in: Tensor, kv_in: Tensor, p: MhaParams,
                    training: bool = False, rng=None) -> Tensor:
    """Per-sample cross-attention where each row is a length-1 sequence.

    With a single key per sample every head's softmax weight is exactly 1, so in
    eval mode the result equals ``(kv_in @ w_v) @ w_o`` bit for bit.
    """
    _check_input("cross_attention query", query_in, p.w_q.shape[0])
    _check_input("cross_attention key/value", kv_in, p.w_k.shape[0])
    if query_in.shape[0] != kv_in.shape[0]:
        raise DimensionError(
            f"cross_attention: batch sizes differ ({query_in.shape[0]} vs {kv_in.shape[0]})")
    b, d_a = query_in.shape[0], p.attn_dim
    # project in 2-d so the value path is the same gemm as the reference composition
    q = T.reshape(T.matmul(query_in, p.w_q), (b, 1, d_a))
    k = T.reshape(T.matmul(kv_in, p.w_k), (b, 1, d_a))
    v = T.reshape(T.matmul(kv_in, p.w_v), (b, 1, d_a))
    ctx = attend(q, k, v, p.heads, p.dropout_rate, training, rng)
    return T.matmul(T.reshape(ctx, (b, d_a)), p.w_o)


def self_attention(x: Tensor, p: MhaParams, training: bool = False, rng=None) -> Tensor:
    """Full self-attention over a (B, N, D) token sequence (no masking)."""
    _check_input("self_attention", x, p.w_q.shape[0])
    q = T.matmul(x, p.w_q)
    k = T.matmul(x, p.w_k)
    v = T.matmul(x, p.w_v)
    return T.matmul(attend(q, k, v, p.heads, p.dropout_rate, training, rng), p.w_o)


# ---------------------------------------------------------------------------
# Gated FFN and projection head
# ---------------------------------------------------------------------------

@dataclass
class GatedFfnParams:
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    dropout_rate: float = 0.1

    def __post_init__(self):
        d, h = self.w_gate.shape
        if h <= 0 or self.w_up.shape != (d, h) or self.w_down.shape != (h, d):
            raise ConfigurationError(
                f"inconsistent GatedFFN shapes: gate {self.w_gate.shape}, "
                f"up {self.w_up.shape}, down {self.w_down.shape}")

    @classmethod
    def init(cls, rng, dim: int, hidden: Optional[int] = None,
             dropout_rate: float = 0.1) -> "GatedFfnParams":
        hidden = 2 * dim if hidden is None else hidden
        return cls(normal_param(rng, (dim, hidden)), normal_param(rng, (dim, hidden)),
                   normal_param(rng, (hidden, dim)), dropout_rate)


def gated_ffn(x: Tensor, p: GatedFfnParams, training: bool = False, rng=None) -> Tensor:
    """GELU-gated linear unit: (GELU(x W_gate) * (x W_up)) W_down."""
    _check_input("gated_ffn", x, p.w_gate.shape[0])
    hidden = T.mul(T.gelu(T.matmul(x, p.w_gate)), T.matmul(x, p.w_up))
    hidden = T.dropout(hidden, p.dropout_rate, training, rng)
    return T.matmul(hidden, p.w_down)


@dataclass
class ProjectionParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d_in, d_h = self.w1.shape
        if self.b1.shape != (d_h,) or self.w2.shape[0] != d_h or self.b2.shape != (self.w2.shape[1],):
            raise ConfigurationError(
                f"inconsistent projection shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}")

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, rng, d_in: int, d_hidden: int, d_out: int) -> "ProjectionParams":
        return cls(normal_param(rng, (d_in, d_hidden)), const_param((d_hidden,), 0.0),
                   normal_param(rng, (d_hidden, d_out)), const_param((d_out,), 0.0))


def project_embed(x: Tensor, p: ProjectionParams) -> Tensor:
    """Two-layer GELU MLP followed by row-wise L2 normalisation."""
    _check_input("project_embed", x, p.w1.shape[0])
    h = T.gelu(T.add(T.matmul(x, p.w1), p.b1))
    return T.l2_normalize(T.add(T.matmul(h, p.w2), p.b2))


# ---------------------------------------------------------------------------
# Toy transformer encoders
# ---------------------------------------------------------------------------

@dataclass
class TransformerLayer:
    attn: MhaParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, rng, width: int, heads: int, dropout_rate: float) -> "TransformerLayer":
        hidden = 2 * width
        return cls(
            attn=MhaParams.init(rng, width, width, width, width, heads, dropout_rate),
            ln1_gain=const_param((width,), 1.0), ln1_bias=const_param((width,), 0.0),
            ff_w1=normal_param(rng, (width, hidden)), ff_b1=const_param((hidden,), 0.0),
            ff_w2=normal_param(rng, (hidden, width)), ff_b2=const_param((width,), 0.0),
            ln2_gain=const_param((width,), 1.0), ln2_bias=const_param((width,), 0.0),
        )


def transformer_layer(x: Tensor, p: TransformerLayer, training: bool, rng) -> Tensor:
    # pre-LN residual block
    x = T.add(x, self_attention(T.layer_norm(x, p.ln1_gain, p.ln1_bias), p.attn, training, rng))
    h = T.layer_norm(x, p.ln2_gain, p.ln2_bias)
    h = T.gelu(T.add(T.matmul(h, p.ff_w1), p.ff_b1))
    h = T.dropout(h, p.attn.dropout_rate, training, rng)
    return T.add(x, T.add(T.matmul(h, p.ff_w2), p.ff_b2))


@dataclass
class EncoderParams:
    """Token/patch embedding, positional table, layer stack and final LayerNorm.

    ``kind`` is ``"visual"`` (mean-pool over patch tokens) or ``"text"``
    (take the EOS position).
    """

    embed: Tensor
    pos: Tensor
    layers: List[TransformerLayer]
    lnf_gain: Tensor
    lnf_bias: Tensor
    kind: str = "visual"
    patch_size: int = 8
    bos_id: int = 0
    eos_id: int = 1

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("an encoder needs at least one layer")
        if self.kind not in ("visual", "text"):
            raise ConfigurationError(f"unknown encoder kind {self.kind!r}")
        width = self.embed.shape[1]
        if self.pos.shape[1] != width:
            raise ConfigurationError("positional table width differs from the embedding width")

    @property
    def width(self) -> int:
        return self.embed.shape[1]

    @property
    def max_tokens(self) -> int:
        return self.pos.shape[0]


def init_visual_encoder(rng, frames: int, height: int, width: int, channels: int,
                        patch: int, dim: int, layers: int, heads: int,
                        dropout_rate: float = 0.1) -> EncoderParams:
    if height % patch or width % patch:
        raise ConfigurationError(f"frame size {height}x{width} not divisible by patch {patch}")
    n_tokens = frames * (height // patch) * (width // patch)
    return EncoderParams(
        embed=normal_param(rng, (patch * patch * channels, dim)),
        pos=normal_param(rng, (n_tokens, dim)),
        layers=[TransformerLayer.init(rng, dim, heads, dropout_rate) for _ in range(layers)],
        lnf_gain=const_param((dim,), 1.0), lnf_bias=const_param((dim,), 0.0),
        kind="visual", patch_size=patch,
    )


def init_text_encoder(rng, vocab: int, max_len: int, dim: int, layers: int, heads: int,
                      dropout_rate: float = 0.1, bos_id: int = 0, eos_id: int = 1) -> EncoderParams:
    return EncoderParams(
        embed=normal_param(rng, (vocab, dim)),
        pos=normal_param(rng, (max_len, dim)),
        layers=[TransformerLayer.init(rng, dim, heads, dropout_rate) for _ in range(layers)],
        lnf_gain=const_param((dim,), 1.0), lnf_bias=const_param((dim,), 0.0),
        kind="text", bos_id=bos_id, eos_id=eos_id,
    )


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(B, T, H, W, C) clips -> (B, T*nH*nW, patch*patch*C) patch rows."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[None]
    if frames.ndim != 5:
        raise InputError(f"expected clips shaped (B, T, H, W, C), got {frames.shape}")
    b, t, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"frame size {h}x{w} not divisible by patch {patch}")
    x = frames.reshape(b, t, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, t * (h // patch) * (w // patch), patch * patch * c)


def _run_stack(x: Tensor, p: EncoderParams, training: bool, rng) -> Tensor:
    for layer in p.layers:
        x = transformer_layer(x, layer, training, rng)
    return T.layer_norm(x, p.lnf_gain, p.lnf_bias)


def encode_visual_batch(clips: np.ndarray, p: EncoderParams, training: bool = False,
                        rng=None) -> Tensor:
    """Encode a batch of clips (B, T, H, W, C) into (B, D_v) features."""
    patches = patchify(clips, p.patch_size)
    if patches.shape[1] != p.max_tokens or patches.shape[2] != p.embed.shape[0]:
        raise ConfigurationError(
            f"clip geometry gives {patches.shape[1]} patches of size {patches.shape[2]}; "
            f"encoder expects {p.max_tokens} of size {p.embed.shape[0]}")
    x = T.add(T.matmul(Tensor(patches), p.embed), p.pos)
    return T.mean(_run_stack(x, p, training, rng), axis=1)


def encode_visual(frames: np.ndarray, p: EncoderParams, training: bool = False,
                  rng=None) -> Tensor:
    """Encode one (T, H, W, C) clip into a (1, D_v) feature row."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or min(frames.shape) < 1:
        raise InputError(f"a clip must be a non-empty (T, H, W, C) array, got {frames.shape}")
    return encode_visual_batch(frames[None], p, training, rng)


def validate_tokens(tokens: Sequence[int], p: EncoderParams) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.size < 2:
        raise InputError("a caption needs at least the BOS and EOS markers")
    if not np.issubdtype(ids.dtype, np.integer):
        if not np.all(ids == np.round(ids)):
            raise InputError("token ids must be integers")
        ids = ids.astype(np.int64)
    vocab = p.embed.shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        raise InputError(f"token id outside vocabulary of size {vocab}")
    if ids[0] != p.bos_id or ids[-1] != p.eos_id:
        raise InputError("caption must start with BOS and end with EOS")
    if ids.size > p.max_tokens:
        raise InputError(f"caption length {ids.size} exceeds the positional table ({p.max_tokens})")
    return ids


def encode_text_batch(token_rows: Sequence[Sequence[int]], p: EncoderParams,
                      training: bool = False, rng=None) -> Tensor:
    """Encode captions into (B, D_t) features taken at each EOS position.

    Equal-length captions go through one batched pass; ragged ones are encoded
    one at a time and stacked.
    """
    rows = [validate_tokens(r, p) for r in token_rows]
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        return T.concat([encode_text_batch([r], p, training, rng) for r in rows], axis=0)
    ids = np.stack(rows)
    length = ids.shape[1]
    x = T.add(T.take(p.embed, ids, axis=0), T.take(p.pos, np.arange(length), axis=0))
    x = _run_stack(x, p, training, rng)
    return T.reshape(T.take(x, [length - 1], axis=1), (ids.shape[0], p.width))


def encode_text(tokens: Sequence[int], p: EncoderParams, training: bool = False,
                rng=None) -> Tensor:
    """Encode one caption into a (1, D_t) feature row."""
    return encode_text_batch([tokens], p, training, rng)
