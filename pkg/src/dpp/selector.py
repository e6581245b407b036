"""Learned per-proposal routing over the three operators.

A 3-layer MLP maps each proposal embedding to three logits. During training
the logits are perturbed with Gumbel noise, softened by a temperature, and
the forward output is the hard one-hot of the argmax while gradients flow
through the soft distribution (straight-through). At inference the selection
vector is the plain softmax and the operator is the argmax, ties broken
toward the cheaper operator (higher index).

A soft training mode (no hard forward) is also available; gradient checks
run against it because the hard forward is piecewise constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .operators import OperatorKind

TRAIN_HARD = "train_hard"
TRAIN_SOFT = "train_soft"
INFERENCE = "inference_soft"
_MODES = (TRAIN_HARD, TRAIN_SOFT, INFERENCE)


@dataclass
class SelectionVector:
    """Per-proposal assignment strengths over (g0, g1, g2); sums to one."""

    values: np.ndarray
    mode: str

    @property
    def chosen(self) -> OperatorKind:
        return OperatorKind(int(ad.argmax_last(self.values)))


@dataclass
class SelectorParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("selector temperature must be positive")
        if self.w3.shape[1] != 3:
            raise ValueError("selector output dimension must be 3")

    def named(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            yield f"{prefix}.{name}", getattr(self, name)

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


def init_selector_params(rng: np.random.Generator, d: int, d_s: int,
                         temperature: float = 1.0) -> SelectorParams:
    def affine(fan_in, fan_out):
        return ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                                       (fan_in, fan_out)))
    return SelectorParams(
        w1=affine(d, d_s), b1=ad.parameter(np.zeros(d_s)),
        w2=affine(d_s, d_s), b2=ad.parameter(np.zeros(d_s)),
        w3=affine(d_s, 3), b3=ad.parameter(np.zeros(3)),
        temperature=temperature,
    )


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel samples g = -log(-log(U)), clipped away from 0/1."""
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def selector_logits(embeddings: Tensor, params: SelectorParams) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(embeddings, params.w1), params.b1))
    h = ad.relu(ad.add(ad.matmul(h, params.w2), params.b2))
    return ad.add(ad.matmul(h, params.w3), params.b3)


def route_rows(embeddings: Tensor, params: SelectorParams, mode: str,
               rng: np.random.Generator | None = None):
    """Route a batch of embeddings (n, d).

    Returns (selection tensor (n, 3), chosen operator indices (n,)).
    Selection is independent per proposal; inference is deterministic with
    ties broken toward the cheaper operator.
    """
    if mode not in _MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    n = embeddings.shape[0]
    if n == 0:
        return ad.constant(np.zeros((0, 3))), np.zeros(0, dtype=np.int64)
    logits = selector_logits(embeddings, params)
    if mode == INFERENCE:
        eps = ad.softmax(logits, temperature=params.temperature)
    else:
        if rng is None:
            raise ValueError("training-mode selection needs an explicit rng")
        noise = ad.constant(gumbel_noise(rng, (n, 3)))
        soft = ad.softmax(ad.add(logits, noise), temperature=params.temperature)
        eps = ad.straight_through_onehot(soft) if mode == TRAIN_HARD else soft
    kinds = ad.argmax_last(eps.data if mode != TRAIN_SOFT else eps.data)
    return eps, kinds.astype(np.int64)


def select(embedding: Tensor, params: SelectorParams, mode: str,
           rng: np.random.Generator | None = None) -> SelectionVector:
    """Single-proposal selection (see route_rows for semantics)."""
    if embedding.ndim != 1:
        raise ValueError("select expects a 1-D embedding")
    eps, _ = route_rows(ad.reshape(embedding, (1, -1)), params, mode, rng)
    return SelectionVector(values=eps.data[0].copy(), mode=mode)


def route_batch(embeddings: Tensor, params: SelectorParams, mode: str,
                rng: np.random.Generator | None = None):
    """Spec-level batch surface: per-proposal SelectionVectors and kinds."""
    eps, kinds = route_rows(embeddings, params, mode, rng)
    vectors = [SelectionVector(values=eps.data[i].copy(), mode=mode)
               for i in range(eps.shape[0])]
    return vectors, [OperatorKind(int(k)) for k in kinds]
