"""Adam optimizer with bias-corrected moment estimates.

The update follows the standard form with epsilon added outside the square
root: p -= lr * m_hat / (sqrt(v_hat) + eps). Parameters with a zero gradient
are left bit-identical. State serializes to plain arrays for checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment buffers and the shared step counter."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 5e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-10) -> None:
    """One in-place Adam update over named parameters.

    The step counter increments once per call; parameters missing from
    `grads` (or mapped to None) keep their moments and values untouched.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Stateful wrapper around adam_step for a fixed named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-10):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state,
                  lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.state.t,
            "m": {k: a.copy() for k, a in self.state.m.items()},
            "v": {k: a.copy() for k, a in self.state.v.items()},
        }

    def load_state_dict(self, d: dict) -> None:
        self.state = AdamState(
            m={k: np.array(a) for k, a in d["m"].items()},
            v={k: np.array(a) for k, a in d["v"].items()},
            t=int(d["t"]),
        )
