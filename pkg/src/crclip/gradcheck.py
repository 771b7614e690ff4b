"""
Finite-difference verification of the reverse-mode gradients.

Each suite builds a random instance and returns a scalar-valued function
together with the leaf tensors to differentiate. The analytic gradient from
``backward`` is compared with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .cmcr import CmcrParams, refine
from .losses import SmsConfig, mimm_loss, similarity_matrix, sms_loss
from .nn import (GatedFfnParams, MhaParams, ProjectionParams, cross_attention, gated_ffn,
                 init_text_encoder, init_visual_encoder, encode_text_batch,
                 encode_visual_batch, parameters, project_embed)
from .tensor import Tensor

STEP = 1e-5
TOL_ELEMENTWISE = 1e-5
TOL_COMPOSED = 1e-4

Instance = Tuple[Callable[[], Tensor], List[Tensor]]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two max magnitudes."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = STEP) -> np.ndarray:
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = STEP) -> float:
    """Largest relative error over all leaves between backward and central differences."""
    for t in leaves:
        t.requires_grad = True
        t.zero_grad()
    T.get_tape().clear()
    T.backward(f())
    worst = 0.0
    for t in leaves:
        worst = max(worst, relative_error(t.grad, numerical_grad(f, t, h)))
    return worst


def _leaf(rng, *shape, lo=None, hi=None) -> Tensor:
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True)


def _probe(out_fn: Callable[[], Tensor], shape, rng) -> Callable[[], Tensor]:
    # random linear functional so every output entry contributes
    w = rng.normal(size=shape)
    return lambda: T.sum(T.mul(out_fn(), w))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def _unary(op, lo=None, hi=None):
    def build(rng) -> Instance:
        shape = tuple(rng.integers(1, 5, size=2))
        x = _leaf(rng, *shape, lo=lo, hi=hi)
        return _probe(lambda: op(x), shape, rng), [x]
    return build


def _binary(op):
    def build(rng) -> Instance:
        shape = tuple(rng.integers(1, 5, size=2))
        a, b = _leaf(rng, *shape), _leaf(rng, shape[1])  # second operand broadcasts
        return _probe(lambda: op(a, b), shape, rng), [a, b]
    return build


def _relu(rng) -> Instance:
    shape = tuple(rng.integers(1, 5, size=2))
    data = rng.normal(size=shape)
    data = np.where(np.abs(data) < 1e-2, 0.5, data)  # stay clear of the kink
    x = Tensor(data, requires_grad=True)
    return _probe(lambda: T.relu(x), shape, rng), [x]


def _matmul(rng) -> Instance:
    m, k, n = rng.integers(1, 8, size=3)
    a, b = _leaf(rng, m, k), _leaf(rng, k, n)
    return _probe(lambda: T.matmul(a, b), (m, n), rng), [a, b]


def _batched_matmul(rng) -> Instance:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return _probe(lambda: T.matmul(a, b), (2, 3, 5), rng), [a, b]


def _softmax(rng) -> Instance:
    shape = tuple(rng.integers(1, 7, size=2))
    axis = int(rng.integers(0, 2))
    x = _leaf(rng, *shape)
    return _probe(lambda: T.softmax(x, axis), shape, rng), [x]


def _layer_norm(rng) -> Instance:
    b, d = int(rng.integers(1, 5)), int(rng.integers(2, 9))
    x, g, bias = _leaf(rng, b, d), _leaf(rng, d), _leaf(rng, d)
    return _probe(lambda: T.layer_norm(x, g, bias), (b, d), rng), [x, g, bias]


def _l2_normalize(rng) -> Instance:
    b, d = int(rng.integers(1, 5)), int(rng.integers(1, 17))
    x = _leaf(rng, b, d)
    return _probe(lambda: T.l2_normalize(x), (b, d), rng), [x]


def _mean(rng) -> Instance:
    shape = tuple(rng.integers(1, 5, size=2))
    x = _leaf(rng, *shape)
    axis = [None, 0, 1][int(rng.integers(0, 3))]
    out_shape = np.empty(shape).mean(axis=axis).shape
    return _probe(lambda: T.mean(x, axis), out_shape, rng), [x]


def _shape_ops(rng) -> Instance:
    x, y = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    idx = rng.integers(0, 4, size=5)

    def f():
        z = T.concat([T.transpose(x, (2, 0, 1)), T.transpose(y, (2, 0, 1))], axis=0)
        z = T.reshape(z, (8, 6))
        return T.take(z, idx, axis=0)

    return _probe(f, (5, 6), rng), [x, y]


def _dropout(rng) -> Instance:
    shape = tuple(rng.integers(2, 6, size=2))
    x = _leaf(rng, *shape)
    seed = int(rng.integers(1 << 30))
    return _probe(lambda: T.dropout(x, 0.3, True, np.random.default_rng(seed)), shape, rng), [x]


def _cross_attention(rng) -> Instance:
    b = 3
    q_in, kv_in = _leaf(rng, b, 5), _leaf(rng, b, 6)
    p = MhaParams(_leaf(rng, 5, 8), _leaf(rng, 6, 8), _leaf(rng, 6, 8), _leaf(rng, 8, 4), heads=2)
    return (_probe(lambda: cross_attention(q_in, kv_in, p), (b, 4), rng),
            [q_in, kv_in, p.w_q, p.w_k, p.w_v, p.w_o])


def _gated_ffn(rng) -> Instance:
    x = _leaf(rng, 3, 5)
    p = GatedFfnParams(_leaf(rng, 5, 10), _leaf(rng, 5, 10), _leaf(rng, 10, 5))
    return _probe(lambda: gated_ffn(x, p), (3, 5), rng), [x, p.w_gate, p.w_up, p.w_down]


def _project_embed(rng) -> Instance:
    x = _leaf(rng, 4, 6)
    p = ProjectionParams(_leaf(rng, 6, 7), _leaf(rng, 7), _leaf(rng, 7, 4), _leaf(rng, 4))
    return _probe(lambda: project_embed(x, p), (4, 4), rng), [x, *parameters(p)]


def _encoders(rng) -> Instance:
    g = np.random.default_rng(int(rng.integers(1 << 30)))
    vis = init_visual_encoder(g, 1, 4, 4, 1, 2, 6, 1, 2, 0.0)
    txt = init_text_encoder(g, 7, 4, 6, 1, 2, 0.0)
    for t in parameters(vis) + parameters(txt):
        t.data = g.normal(0, 0.5, size=t.shape)
    clips = rng.uniform(size=(2, 1, 4, 4, 1))
    tokens = [[0, 3, 4, 1], [0, 5, 2, 1]]
    w = rng.normal(size=(2, 6))

    def f():
        return T.add(T.sum(T.mul(encode_visual_batch(clips, vis), w)),
                     T.sum(T.mul(encode_text_batch(tokens, txt), w)))

    return f, parameters(vis) + parameters(txt)


def _sms(rng) -> Instance:
    b = int(rng.integers(2, 6))
    S = _leaf(rng, b, b, lo=-1.0, hi=1.0)
    C = rng.choice([0.0, 0.5, 1.0], size=(b, b))
    cfg = SmsConfig(tau=0.05, gamma=float(rng.uniform(1.0, 10.0)))
    return (lambda: sms_loss(S, C, cfg)), [S]


def _mimm(rng) -> Instance:
    b = int(rng.integers(2, 6))
    data = rng.uniform(-1, 1, size=(b, b))
    margin = 0.2
    # nudge entries away from hinge kinks
    for _ in range(100):
        diag = np.diag(data)[:, None]
        kink = np.minimum(np.abs(margin - diag + data), np.abs(margin - diag + data.T))
        if np.all(kink >= 1e-3):
            break
        data = rng.uniform(-1, 1, size=(b, b))
    S = Tensor(data, requires_grad=True)
    return (lambda: mimm_loss(S, margin)), [S]


def _composed(rng) -> Instance:
    """CMCR -> projection heads -> cosine similarities -> SMS loss, B = 4."""
    b, d_v, d_t = 4, 6, 5
    g = np.random.default_rng(int(rng.integers(1 << 30)))
    cm = CmcrParams.init(g, d_v, d_t, attn_dim=8, heads=2, dropout_rate=0.0)
    head_v = ProjectionParams.init(g, d_t, 6, 4)
    head_t = ProjectionParams.init(g, d_v, 6, 4)
    for t in parameters(cm) + parameters(head_v) + parameters(head_t):
        t.data = g.normal(0, 0.5, size=t.shape)
    f_v, f_t = _leaf(rng, b, d_v), _leaf(rng, b, d_t)
    C = rng.choice([0.0, 0.5, 1.0], size=(b, b))
    np.fill_diagonal(C, 1.0)
    cfg = SmsConfig(tau=0.05, gamma=5.0)

    def f():
        r_v, r_t = refine(f_v, f_t, cm)
        S = similarity_matrix(project_embed(r_v, head_v), project_embed(r_t, head_t))
        return sms_loss(S, C, cfg)

    return f, [f_v, f_t, *parameters(cm), *parameters(head_v), *parameters(head_t)]


@dataclass(frozen=True)
class Suite:
    name: str
    build: Callable[[np.random.Generator], Instance]
    tol: float


SUITES: List[Suite] = [
    Suite("add", _binary(T.add), TOL_ELEMENTWISE),
    Suite("sub", _binary(T.sub), TOL_ELEMENTWISE),
    Suite("mul", _binary(T.mul), TOL_ELEMENTWISE),
    Suite("scale", _unary(lambda x: T.scale(x, -2.5)), TOL_ELEMENTWISE),
    Suite("exp", _unary(T.exp), TOL_ELEMENTWISE),
    Suite("log1p", _unary(T.log1p, lo=-0.5, hi=3.0), TOL_ELEMENTWISE),
    Suite("sigmoid", _unary(T.sigmoid), TOL_ELEMENTWISE),
    Suite("gelu", _unary(T.gelu), TOL_ELEMENTWISE),
    Suite("relu", _relu, TOL_ELEMENTWISE),
    Suite("mean", _mean, TOL_ELEMENTWISE),
    Suite("matmul", _matmul, TOL_ELEMENTWISE),
    Suite("matmul_batched", _batched_matmul, TOL_ELEMENTWISE),
    Suite("softmax", _softmax, TOL_ELEMENTWISE),
    Suite("layer_norm", _layer_norm, TOL_ELEMENTWISE),
    Suite("l2_normalize", _l2_normalize, TOL_ELEMENTWISE),
    Suite("shape_ops", _shape_ops, TOL_ELEMENTWISE),
    Suite("dropout", _dropout, TOL_ELEMENTWISE),
    Suite("cross_attention", _cross_attention, TOL_COMPOSED),
    Suite("gated_ffn", _gated_ffn, TOL_COMPOSED),
    Suite("project_embed", _project_embed, TOL_COMPOSED),
    Suite("encoders", _encoders, TOL_COMPOSED),
    Suite("sms_loss", _sms, TOL_COMPOSED),
    Suite("mimm_loss", _mimm, TOL_COMPOSED),
    Suite("cmcr_proj_sms", _composed, TOL_COMPOSED),
]


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def run_suite(suite: Suite, cases: int, seed: int) -> SuiteResult:
    rng = np.random.default_rng([seed, sum(map(ord, suite.name))])
    start = time.perf_counter()
    worst = 0.0
    for _ in range(cases):
        f, leaves = suite.build(rng)
        worst = max(worst, check(f, leaves))
    return SuiteResult(suite.name, cases, worst, suite.tol, time.perf_counter() - start)


def run_all(cases: int = 5, seed: int = 0, names=None) -> Dict[str, SuiteResult]:
    chosen = [s for s in SUITES if names is None or s.name in names]
    return {s.name: run_suite(s, cases, seed) for s in chosen}
