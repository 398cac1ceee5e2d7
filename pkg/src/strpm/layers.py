"""Parameter containers built on the tensor primitives."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConvParams:
    """Weights, bias and geometry of one (possibly transposed) convolution.

    Plain convolutions store weights as ``(out_c, in_c, k, k)``; transposed ones
    as ``(in_c, out_c, k, k)`` so a shared array gives the adjoint pair.
    """

    def __init__(self, in_c: int, out_c: int, k: int, stride: int = 1, padding: int = 0,
                 transposed: bool = False, rng: np.random.Generator | None = None):
        if min(in_c, out_c, k, stride) < 1 or padding < 0:
            raise ValueError("invalid convolution geometry")
        self.in_c, self.out_c, self.k = in_c, out_c, k
        self.stride, self.padding, self.transposed = stride, padding, transposed
        shape = (in_c, out_c, k, k) if transposed else (out_c, in_c, k, k)
        # fan_in follows dim 1 of the stored array for both layouts
        bound = np.sqrt(1.0 / (shape[1] * k * k))
        w = rng.uniform(-bound, bound, size=shape) if rng is not None else np.zeros(shape)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_c), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        fn = T.conv_transpose2d if self.transposed else T.conv2d
        return fn(x, self.weight, self.bias, self.stride, self.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.transposed:
            return ((h - 1) * self.stride - 2 * self.padding + self.k,
                    (w - 1) * self.stride - 2 * self.padding + self.k)
        return (T.conv_output_size(h, self.k, self.stride, self.padding),
                T.conv_output_size(w, self.k, self.stride, self.padding))

    def flops(self, h: int, w: int) -> int:
        """FLOPs for one sample at input size ``h x w`` (2 per MAC + bias adds)."""
        oh, ow = self.output_hw(h, w)
        if self.transposed:
            macs = h * w * self.in_c * self.out_c * self.k * self.k
        else:
            macs = oh * ow * self.in_c * self.out_c * self.k * self.k
        return 2 * macs + oh * ow * self.out_c

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def num_params(self) -> int:
        return self.weight.size + self.bias.size


class Module:
    """Minimal parameter registry: subclasses list their children in ``_children``."""

    _children: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = ""):
        for name in self._children:
            child = getattr(self, name)
            items = child if isinstance(child, list) else [child]
            for i, item in enumerate(items):
                sub = f"{name}.{i}" if isinstance(child, list) else name
                full = f"{prefix}.{sub}" if prefix else sub
                yield from item.named_parameters(full)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_weights(self) -> None:
        for p in self.parameters().values():
            p.data[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.parameters().items())

    def load_arrays(self, arrays) -> None:
        params = self.parameters()
        for name, p in params.items():
            if name not in arrays:
                raise KeyError(f"missing array {name!r}")
            src = np.asarray(arrays[name])
            if src.shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: expected {p.shape}, got {src.shape}")
            p.data[...] = src
