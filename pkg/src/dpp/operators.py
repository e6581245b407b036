"""Per-proposal operator set, pairwise attention, and the FLOP cost model.

Three operators of strictly decreasing cost can be applied to a proposal
embedding at each head stage:

* ``G0`` - a generated-weights block (two weight matrices are produced from
  the embedding itself, so the transform is input-dependent) followed by a
  feed-forward block, both with residual connections and layer norm.
* ``G1`` - the static feed-forward block alone.
* ``G2`` - identity: the embedding is passed through bit-identically and no
  arithmetic is performed or charged.

Each stage also carries shared machinery: single-head scaled dot-product
self-attention across all proposals (the pairwise component), and the
classification/box-delta prediction heads applied after ``G0``/``G1``.

The analytic :class:`CostModel` is assembled from the same per-op formulas
in :mod:`dpp.flops` that the executing tensor ops charge at runtime, so for
any routing the closed-form cost equals the instrumented count exactly.
The attention cost decomposes exactly as
``n * c_attn + n(n-1)/2 * c_pair`` using ``n^2 = 2 * pairs + n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from . import flops
from .autodiff import Tensor


class OperatorKind(IntEnum):
    """The operator menu, ordered by decreasing cost (G0 > G1 > G2)."""

    G0 = 0
    G1 = 1
    G2 = 2


@dataclass
class OperatorParams:
    """All trainable tensors of one head stage (selector excluded).

    G2 contributes no entries: it is parameter-free by construction.
    """

    # pairwise self-attention projections
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    # g0: weight generators, post-generation norm, then the shared FFN block
    g0_wa: Tensor
    g0_ba: Tensor
    g0_wb: Tensor
    g0_bb: Tensor
    g0_ln_dy_g: Tensor
    g0_ln_dy_b: Tensor
    g0_ln_g: Tensor
    g0_ln_b: Tensor
    g0_w1: Tensor
    g0_b1: Tensor
    g0_w2: Tensor
    g0_b2: Tensor
    # g1: norm + FFN
    g1_ln_g: Tensor
    g1_ln_b: Tensor
    g1_w1: Tensor
    g1_b1: Tensor
    g1_w2: Tensor
    g1_b2: Tensor
    # shared per-stage prediction heads
    cls_w: Tensor
    cls_b: Tensor
    box_w: Tensor
    box_b: Tensor

    def named(self, prefix: str):
        for name in self.__dataclass_fields__:
            yield f"{prefix}.{name}", getattr(self, name)

    def tensors(self):
        return [getattr(self, name) for name in self.__dataclass_fields__]


def _affine_init(rng, fan_in: int, fan_out: int) -> Tensor:
    return ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))


def init_operator_params(rng: np.random.Generator, d: int, d_h: int,
                         d_ff: int, num_classes: int) -> OperatorParams:
    zeros = lambda n: ad.parameter(np.zeros(n))
    ones = lambda n: ad.parameter(np.ones(n))
    c1 = num_classes + 1  # trailing class is "no object"
    return OperatorParams(
        wq=_affine_init(rng, d, d), bq=zeros(d),
        wk=_affine_init(rng, d, d), bk=zeros(d),
        wv=_affine_init(rng, d, d), bv=zeros(d),
        g0_wa=_affine_init(rng, d, d * d_h), g0_ba=zeros(d * d_h),
        g0_wb=_affine_init(rng, d, d_h * d), g0_bb=zeros(d_h * d),
        g0_ln_dy_g=ones(d), g0_ln_dy_b=zeros(d),
        g0_ln_g=ones(d), g0_ln_b=zeros(d),
        g0_w1=_affine_init(rng, d, d_ff), g0_b1=zeros(d_ff),
        g0_w2=_affine_init(rng, d_ff, d), g0_b2=zeros(d),
        g1_ln_g=ones(d), g1_ln_b=zeros(d),
        g1_w1=_affine_init(rng, d, d_ff), g1_b1=zeros(d_ff),
        g1_w2=_affine_init(rng, d_ff, d), g1_b2=zeros(d),
        cls_w=_affine_init(rng, d, c1), cls_b=zeros(c1),
        box_w=_affine_init(rng, d, 4), box_b=zeros(4),
    )


def _ffn_block(rows: Tensor, ln_g, ln_b, w1, b1, w2, b2) -> Tensor:
    """Pre-norm feed-forward with residual: x + W2 relu(W1 LN(x) + b1) + b2."""
    h = ad.layer_norm(rows, ln_g, ln_b)
    h = ad.relu(ad.add(ad.matmul(h, w1), b1))
    h = ad.add(ad.matmul(h, w2), b2)
    return ad.add(rows, h)


def apply_operator_rows(kind: OperatorKind, rows: Tensor,
                        params: OperatorParams) -> Tensor:
    """Apply one operator to a batch of embeddings (n, d)."""
    if kind == OperatorKind.G2:
        return rows  # same tensor: bit-identical, zero FLOPs
    if kind == OperatorKind.G1:
        return _ffn_block(rows, params.g1_ln_g, params.g1_ln_b,
                          params.g1_w1, params.g1_b1,
                          params.g1_w2, params.g1_b2)
    if kind != OperatorKind.G0:
        raise ValueError(f"unknown operator kind {kind!r}")
    n, d = rows.shape
    d_h = params.g0_wa.shape[1] // d
    gen_a = ad.add(ad.matmul(rows, params.g0_wa), params.g0_ba)
    mats_a = ad.reshape(gen_a, (n, d, d_h))
    gen_b = ad.add(ad.matmul(rows, params.g0_wb), params.g0_bb)
    mats_b = ad.reshape(gen_b, (n, d_h, d))
    t = ad.row_matmul(rows, mats_a)
    t = ad.row_matmul(t, mats_b)
    t = ad.layer_norm(t, params.g0_ln_dy_g, params.g0_ln_dy_b)
    h = ad.add(rows, t)
    return _ffn_block(h, params.g0_ln_g, params.g0_ln_b,
                      params.g0_w1, params.g0_b1,
                      params.g0_w2, params.g0_b2)


def apply_operator(kind: OperatorKind, embedding: Tensor,
                   params: OperatorParams) -> Tensor:
    """Single-proposal convenience wrapper over apply_operator_rows."""
    if embedding.ndim != 1:
        raise ValueError("apply_operator expects a 1-D embedding")
    if kind == OperatorKind.G2:
        return embedding
    out = apply_operator_rows(kind, ad.reshape(embedding, (1, -1)), params)
    return ad.reshape(out, (embedding.shape[0],))


def pairwise_attend(embeddings: Tensor, params: OperatorParams):
    """Single-head self-attention across proposals, with residual.

    Returns (output rows, attention-weight array). For a single proposal the
    output is the embedding plus its value projection.
    """
    n, d = embeddings.shape
    q = ad.add(ad.matmul(embeddings, params.wq), params.bq)
    k = ad.add(ad.matmul(embeddings, params.wk), params.bk)
    v = ad.add(ad.matmul(embeddings, params.wv), params.bv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
    attn = ad.softmax(scores)
    ctx = ad.matmul(attn, v)
    out = ad.add(embeddings, ctx)
    return out, attn.data


def predict(rows: Tensor, params: OperatorParams):
    """Class logits and box deltas for processed embeddings (n, d)."""
    logits = ad.add(ad.matmul(rows, params.cls_w), params.cls_b)
    deltas = ad.add(ad.matmul(rows, params.box_w), params.box_b)
    return logits, deltas


def refine_boxes(prev_boxes: Tensor, deltas: Tensor) -> Tensor:
    """Apply (dx, dy, dw, dh) deltas to xyxy boxes, clamped to [0, 1]^2.

    Centers move by delta * previous size; sizes scale by exp(delta) with
    the exponent clamped to keep the update bounded. The output box is
    always valid (x_min <= x_max, y_min <= y_max) because clamping is
    monotone. ``prev_boxes`` is expected to be detached.
    """
    col = lambda t, j: ad.narrow(t, 1, j, 1)
    px0, py0, px1, py1 = (col(prev_boxes, j) for j in range(4))
    dx, dy, dw, dh = (col(deltas, j) for j in range(4))
    pw = ad.sub(px1, px0)
    ph = ad.sub(py1, py0)
    pcx = ad.scale(ad.add(px0, px1), 0.5)
    pcy = ad.scale(ad.add(py0, py1), 0.5)
    ncx = ad.add(pcx, ad.mul(dx, pw))
    ncy = ad.add(pcy, ad.mul(dy, ph))
    nw = ad.mul(pw, ad.exp(ad.clamp(dw, -4.0, 4.0)))
    nh = ad.mul(ph, ad.exp(ad.clamp(dh, -4.0, 4.0)))
    hx = ad.scale(nw, 0.5)
    hy = ad.scale(nh, 0.5)
    x0 = ad.clamp(ad.sub(ncx, hx), 0.0, 1.0)
    y0 = ad.clamp(ad.sub(ncy, hy), 0.0, 1.0)
    x1 = ad.clamp(ad.add(ncx, hx), 0.0, 1.0)
    y1 = ad.clamp(ad.add(ncy, hy), 0.0, 1.0)
    return ad.concat([x0, y0, x1, y1], axis=1)


# ---------------------------------------------------------------------------
# analytic cost model


@dataclass(frozen=True)
class CostModel:
    """Per-proposal/per-pair FLOPs of one head stage.

    ``c_g0``/``c_g1``/``c_g2`` include the prediction heads and box update
    (G2 skips those entirely, hence exactly zero). ``c_attn`` is the
    per-proposal linear share of the attention block and ``c_pair`` its
    per-unordered-pair share; ``c_selector`` is one routing evaluation.
    """

    c_g0: float
    c_g1: float
    c_g2: float
    c_selector: float
    c_pair: float
    c_attn: float = 0.0

    def operator_cost(self, kind: OperatorKind) -> float:
        return (self.c_g0, self.c_g1, self.c_g2)[int(kind)]

    def validate(self) -> None:
        if self.c_g2 != 0:
            raise ValueError("identity operator must have exactly zero cost")
        if not (self.c_g0 > self.c_g1 > self.c_g2):
            raise ValueError("operator costs must be strictly ordered g0 > g1 > g2")


def flops_of(op: str, *dims: int) -> int:
    """Closed-form FLOPs of one primitive, by the shared counting rules."""
    table = {
        "matmul": flops.matmul,
        "row_matmul": flops.row_matmul,
        "elementwise": flops.elementwise,
        "softmax": flops.softmax,
        "log_softmax": flops.log_softmax,
        "layer_norm": flops.layer_norm,
        "reduce_sum": flops.reduce_sum,
        "reduce_mean": flops.reduce_mean,
    }
    if op not in table:
        raise ValueError(f"unknown primitive {op!r}")
    return table[op](*dims)


def ffn_block_flops(d: int, d_ff: int) -> int:
    """One pre-norm FFN block with residual, per proposal."""
    return (flops.layer_norm(1, d)
            + flops.matmul(1, d, d_ff) + flops.elementwise(d_ff)  # W1 + b1
            + flops.elementwise(d_ff)                             # relu
            + flops.matmul(1, d_ff, d) + flops.elementwise(d)     # W2 + b2
            + flops.elementwise(d))                               # residual


def box_refine_flops() -> int:
    """Per-proposal cost of refine_boxes, op for op."""
    e = flops.elementwise
    return (e(1) + e(1)            # pw, ph
            + 2 * e(1) + 2 * e(1)  # pcx, pcy (add + scale each)
            + 2 * e(1) + 2 * e(1)  # ncx, ncy (mul + add each)
            + 3 * e(1) + 3 * e(1)  # nw, nh (clamp + exp + mul each)
            + e(1) + e(1)          # hx, hy
            + 4 * 2 * e(1))        # four corners (sub/add + clamp each)


def predict_flops(d: int, num_classes: int) -> int:
    """Prediction heads plus box update, per proposal."""
    c1 = num_classes + 1
    return (flops.matmul(1, d, c1) + flops.elementwise(c1)
            + flops.matmul(1, d, 4) + flops.elementwise(4)
            + box_refine_flops())


def selector_flops(d: int, d_s: int) -> int:
    """One selector MLP evaluation plus its softmax, per proposal."""
    return (flops.matmul(1, d, d_s) + 2 * flops.elementwise(d_s)   # affine+relu
            + flops.matmul(1, d_s, d_s) + 2 * flops.elementwise(d_s)
            + flops.matmul(1, d_s, 3) + flops.elementwise(3)
            + flops.softmax(1, 3))


def derive_cost_model(d: int, d_h: int, d_ff: int, num_classes: int,
                      d_s: int) -> CostModel:
    """Cost model for one stage of the configured architecture."""
    c_g1 = ffn_block_flops(d, d_ff) + predict_flops(d, num_classes)
    c_g0 = (flops.matmul(1, d, d * d_h) + flops.elementwise(d * d_h)
            + flops.matmul(1, d, d_h * d) + flops.elementwise(d_h * d)
            + flops.row_matmul(1, d, d_h) + flops.row_matmul(1, d_h, d)
            + flops.layer_norm(1, d) + flops.elementwise(d)  # norm + residual
            + ffn_block_flops(d, d_ff) + predict_flops(d, num_classes))
    # attention for n proposals costs lin*n + quad*n^2; with
    # n^2 = 2*pairs + n this is exactly n*c_attn + pairs*c_pair
    quad = 2 * d + 1 + 4 + 2 * d           # scores, scaling, softmax, ctx
    lin = 3 * (flops.matmul(1, d, d) + flops.elementwise(d)) \
        + flops.elementwise(d) - 1         # projections+biases, residual, softmax -1
    model = CostModel(
        c_g0=c_g0,
        c_g1=c_g1,
        c_g2=0,
        c_selector=selector_flops(d, d_s),
        c_pair=2 * quad,
        c_attn=lin + quad,
    )
    model.validate()
    return model
