"""Parameter containers and reusable layers on top of the tensor engine."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .engine import ops
from .engine.tensor import Tensor


class Module:
    """Registers parameters, buffers and children in assignment order.

    The traversal order of :meth:`named_tensors` is the order attributes were
    assigned in ``__init__``; weights files rely on it being stable.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters then buffers, as raw arrays, in fixed traversal order."""
        for name, p in self.named_parameters():
            yield name, p.data
        yield from self.named_buffers()

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self.modules():
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False,
                 dtype=np.float32):
        super().__init__()
        w = np.zeros((d_out, d_in), dtype) if zero else trunc_normal(rng, (d_out, d_in), dtype=dtype)
        self.weight = _param(w)
        self.bias = _param(np.zeros(d_out, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride, padding, rng: np.random.Generator,
                 groups: int = 1, zero: bool = False, dtype=np.float32):
        super().__init__()
        kernel = ops._triple(kernel)
        shape = (c_out, c_in // groups) + kernel
        w = np.zeros(shape, dtype) if zero else trunc_normal(rng, shape, dtype=dtype)
        self.weight = _param(w)
        self.bias = _param(np.zeros(c_out, dtype))
        self.stride = ops._triple(stride)
        self.padding = ops._triple(padding)
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    """Normalizes the last axis."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = _param(np.ones(dim, dtype))
        self.beta = _param(np.zeros(dim, dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class ChannelLayerNorm(LayerNorm):
    """LayerNorm over the channel axis of [N, C, T, H, W]."""

    def forward(self, x: Tensor) -> Tensor:
        y = ops.transpose_axes(x, (0, 2, 3, 4, 1))
        y = ops.layer_norm(y, self.gamma, self.beta, self.eps)
        return ops.transpose_axes(y, (0, 4, 1, 2, 3))


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = _param(np.ones(channels, dtype))
        self.beta = _param(np.zeros(channels, dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype))
        self.register_buffer("running_var", np.ones(channels, dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm3d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                self.training, self.momentum, self.eps)


class DropPath(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = float(rate)
        self.rng: Optional[np.random.Generator] = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.drop_path(x, self.rate, self.training, self.rng)
