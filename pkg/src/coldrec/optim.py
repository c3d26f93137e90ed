"""Adam optimizer, usable on raw arrays or on autodiff parameters."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One adaptive-moment update over a dict of named arrays.

    ``state`` is mutated in place; pass ``{}`` on the first call. Returns
    the updated params dict (same arrays, updated in place).
    """
    t = state.get("t", 0) + 1
    state["t"] = t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: param {name} {p.shape} vs grad {g.shape}")
        m = state.setdefault("m_" + name, np.zeros_like(p))
        v = state.setdefault("v_" + name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


class Adam:
    """Adam over named autodiff tensors; missing gradients count as zero."""

    def __init__(self, named_tensors: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = dict(named_tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self) -> None:
        params = {n: t.data for n, t in self.tensors.items()}
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for n, t in self.tensors.items()}
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None
