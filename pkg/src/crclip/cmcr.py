"""Cross-modal context refinement: one cross-attention branch per direction."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigurationError, InputError
from .nn import GatedFfnParams, MhaParams, const_param, cross_attention, gated_ffn
from .tensor import Tensor

ROUTINGS = ("default", "swapped")


@dataclass
class CmcrBranch:
    """Weights of one refinement direction.

    ``attn`` reads queries from the residual side and keys/values from the
    other modality; both LayerNorms act on the residual (query) width.
    """

    attn: MhaParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn: GatedFfnParams
    ln2_gain: Tensor
    ln2_bias: Tensor

    def __post_init__(self):
        d_query = self.attn.w_q.shape[0]
        if self.attn.w_o.shape[1] != d_query:
            raise ConfigurationError(
                f"branch output width {self.attn.w_o.shape[1]} must equal the query width "
                f"{d_query} so the residual sum typechecks")
        for t in (self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias):
            if t.shape != (d_query,):
                raise ConfigurationError("LayerNorm parameters must match the query width")
        if self.ffn.w_gate.shape[0] != d_query:
            raise ConfigurationError("GatedFFN width must match the query width")

    @classmethod
    def init(cls, rng, d_query: int, d_kv: int, attn_dim: int = 512, heads: int = 8,
             dropout_rate: float = 0.1, ffn_hidden=None) -> "CmcrBranch":
        return cls(
            attn=MhaParams.init(rng, d_query, d_kv, attn_dim, d_query, heads, dropout_rate),
            ln1_gain=const_param((d_query,), 1.0), ln1_bias=const_param((d_query,), 0.0),
            ffn=GatedFfnParams.init(rng, d_query, ffn_hidden, dropout_rate),
            ln2_gain=const_param((d_query,), 1.0), ln2_bias=const_param((d_query,), 0.0),
        )


@dataclass
class CmcrParams:
    text_query: CmcrBranch    # Q from text, K/V from visual -> refined "visual" output
    vision_query: CmcrBranch  # Q from visual, K/V from text -> refined "text" output

    @classmethod
    def init(cls, rng, d_visual: int, d_text: int, attn_dim: int = 512, heads: int = 8,
             dropout_rate: float = 0.1) -> "CmcrParams":
        return cls(
            text_query=CmcrBranch.init(rng, d_text, d_visual, attn_dim, heads, dropout_rate),
            vision_query=CmcrBranch.init(rng, d_visual, d_text, attn_dim, heads, dropout_rate),
        )

    def swapped(self) -> "CmcrParams":
        return CmcrParams(text_query=self.vision_query, vision_query=self.text_query)


def refine_branch(query: Tensor, context: Tensor, p: CmcrBranch, training: bool = False,
                  rng=None) -> Tensor:
    """LN(q + MHA(q, ctx)) then LN(h + GatedFFN(h)); the residual is the query input."""
    attended = cross_attention(query, context, p.attn, training, rng)
    h = T.layer_norm(T.add(query, attended), p.ln1_gain, p.ln1_bias)
    return T.layer_norm(T.add(h, gated_ffn(h, p.ffn, training, rng)), p.ln2_gain, p.ln2_bias)


def refine(f_v: Tensor, f_t: Tensor, p: CmcrParams, training: bool = False, rng=None):
    """Bidirectional refinement.

    Returns ``(f_v_r, f_t_r)``. ``f_v_r`` is text-queried and keeps the text
    width; ``f_t_r`` is vision-queried and keeps the visual width.
    """
    if f_v.ndim != 2 or f_t.ndim != 2:
        raise InputError(f"refine expects 2-d feature batches, got {f_v.shape} and {f_t.shape}")
    if f_v.shape[0] != f_t.shape[0]:
        raise InputError(f"refine: batch mismatch ({f_v.shape[0]} visual vs {f_t.shape[0]} text)")
    f_v_r = refine_branch(f_t, f_v, p.text_query, training, rng)
    f_t_r = refine_branch(f_v, f_t, p.vision_query, training, rng)
    if f_v_r.shape[1] != f_t.shape[1] or f_t_r.shape[1] != f_v.shape[1]:
        raise ConfigurationError("refined widths do not mirror the input widths")
    return f_v_r, f_t_r


def route(f_v_r: Tensor, f_t_r: Tensor, routing: str = "default"):
    """Map refine outputs to (visual head input, text head input)."""
    if routing == "default":
        return f_v_r, f_t_r
    if routing == "swapped":
        return f_t_r, f_v_r
    raise ConfigurationError(f"routing must be one of {ROUTINGS}, got {routing!r}")
