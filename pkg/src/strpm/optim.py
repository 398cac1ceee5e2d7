"""Adam with bias correction over named parameter tensors."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        # validate everything before mutating anything
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
        for name in self.params:
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays, prefix: str, step_count: int) -> None:
        for kind, store in (("m", self.m), ("v", self.v)):
            for name, buf in store.items():
                key = f"{prefix}.{kind}.{name}"
                if key not in arrays:
                    raise KeyError(f"missing array {key!r}")
                src = np.asarray(arrays[key])
                if src.shape != buf.shape:
                    raise ValueError(f"shape mismatch for {key!r}: expected {buf.shape}, got {src.shape}")
                buf[...] = src
        self.step_count = int(step_count)


def adam_step(params, grads, state: Adam) -> None:
    """Functional form: assign ``grads`` (name -> array) then take one step."""
    for name, p in params.items():
        p.grad = grads.get(name)
    state.step()
