from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.param_name = name


class ParamSet(OrderedDict):
    """Ordered ``name -> Tensor`` map holding a network's parameters and buffers.

    Buffers (batch-norm running statistics) are stored with
    ``requires_grad=False`` and are skipped by the optimizer.
    """

    def trainable(self):
        return [(k, t) for k, t in self.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for _, t in self.trainable():
            if t.grad is not None:
                total += float(np.dot(t.grad.ravel(), t.grad.ravel()))
        return float(np.sqrt(total))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, t in self.items():
            out[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.values())


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")


def adam_step(params: ParamSet, state: AdamState, maximize: bool = False) -> ParamSet:
    """Apply one bias-corrected Adam update to every trainable parameter in place.

    Gradients are checked before anything is modified, so a rejected step
    leaves both ``params`` and ``state`` untouched.
    """
    trainable = params.trainable()
    for name, p in trainable:
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            raise NonFiniteGradient(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in trainable:
        if p.grad is None:
            continue
        g = -p.grad if maximize else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
