"""
Optim - adaptive-moment gradient steps with global grad-norm clipping.
"""

import math
from typing import Dict, List, Sequence

import numpy as np

from .errors import TrainingDivergence
from .graph import Node


def global_norm(grads: Dict[Node, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


class Adam:
    """
    Adam over graph leaves. step() descends by default; maximize=True ascends.
    Gradients are rescaled so their joint L2 norm never exceeds grad_clip (0 disables).
    """

    def __init__(
        self,
        params: Sequence[Node],
        lr: float = 3e-4,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        grad_clip: float = 1.0,
        maximize: bool = False,
        name: str = "adam",
    ):
        self.params: List[Node] = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.maximize = maximize
        self.name = name
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: Dict[Node, np.ndarray]) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = global_norm({p: grads[p] for p in self.params if p in grads})
        if not math.isfinite(norm):
            raise TrainingDivergence(f"{self.name}: non-finite gradient norm")
        scale = 1.0
        if self.grad_clip > 0.0 and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)
        sign = 1.0 if self.maximize else -1.0

        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            g = g * scale
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.value = p.value + sign * self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
        return norm
