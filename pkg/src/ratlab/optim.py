"""SGD and Adam over :class:`~ratlab.autograd.Tensor` parameters (updated in place)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ratlab.autograd import Tensor


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")


class Optimizer:
    """Applies one update per :meth:`step`; non-finite gradients are skipped and counted."""

    def __init__(self, params, kind: str = "adam", lr: float = 1e-3, **kw):
        self.params: list[Tensor] = list(params)
        self.state = OptimizerState(kind=kind, lr=lr, **kw)

    def step(self, grads: dict) -> int:
        st = self.state
        st.step += 1
        skipped = 0
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                skipped += 1
                continue
            if st.kind == "sgd":
                p.data -= st.lr * g
                continue
            m = st.m.get(i)
            if m is None:
                m = st.m[i] = np.zeros_like(p.data)
                st.v[i] = np.zeros_like(p.data)
            v = st.v[i]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            mhat = m / (1.0 - st.beta1 ** st.step)
            vhat = v / (1.0 - st.beta2 ** st.step)
            p.data -= st.lr * mhat / (np.sqrt(vhat) + st.eps)
        st.skipped += skipped
        return skipped


def SGD(params, lr: float) -> Optimizer:
    return Optimizer(params, "sgd", lr)


def Adam(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
         eps: float = 1e-8) -> Optimizer:
    return Optimizer(params, "adam", lr, beta1=beta1, beta2=beta2, eps=eps)
