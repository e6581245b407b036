"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay and per-group learning rates.

    ``groups`` is a list of dicts with keys ``params`` (list of Tensors) and
    ``lr``. Parameter order inside groups fixes the update order, so steps
    are deterministic.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"])}
                       for g in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [[np.zeros_like(p.data) for p in g["params"]]
                   for g in self.groups]
        self._v = [[np.zeros_like(p.data) for p in g["params"]]
                   for g in self.groups]

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def scale_lr(self, factor: float) -> None:
        for g in self.groups:
            g["lr"] *= factor

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for gi, g in enumerate(self.groups):
            lr = g["lr"]
            for pi, p in enumerate(g["params"]):
                if p.grad is None:
                    continue
                m = self._m[gi][pi]
                v = self._v[gi][pi]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * (p.grad * p.grad)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p.data
                p.data -= lr * update
