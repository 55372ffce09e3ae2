"""Parameter containers and the trainable layers the model is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .errors import DimensionError
from .neuron import LIFNode
from .tensor import Tensor


class Module:
    """Minimal layer container: recursive parameter/buffer discovery and train/eval."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def lif_nodes(self) -> Iterator[LIFNode]:
        for m in self.modules():
            for val in vars(m).values():
                if isinstance(val, LIFNode):
                    yield val

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        missing = (set(params) | buffers) - set(state)
        if missing:
            raise KeyError(f"state dict lacks {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()
        for name in buffers:
            owner, attr = self._resolve(name)
            old = getattr(owner, attr)
            setattr(owner, attr, np.asarray(state[name]).astype(old.dtype).copy())

    def _resolve(self, dotted: str):
        obj = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj, parts[-1]

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self


def trunc_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    vals = truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng)
    return (vals * std).astype(T.get_default_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(trunc_normal((d_in, d_out), 0.02, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=T.get_default_dtype()), requires_grad=True) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        fan_in = c_in * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        self.weight = Tensor(w.astype(T.get_default_dtype()), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=T.get_default_dtype()), requires_grad=True) if bias else None
        self.stride, self.padding = stride, padding
        self.calls = 0

    def __call__(self, x: Tensor) -> Tensor:
        self.calls += 1
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalisation over every axis but ``feature_axis``.

    Training mode uses (optionally masked) batch statistics and updates running
    averages; eval mode uses the running averages.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, num_features: int, feature_axis: int = -1, momentum: float = 0.1,
                 eps: float = 1e-5):
        dt = T.get_default_dtype()
        self.gamma = Tensor(np.ones(num_features, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dt)
        self.running_var = np.ones(num_features, dtype=dt)
        self.feature_axis = feature_axis
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        fa = self.feature_axis % x.ndim
        if x.shape[fa] != self.gamma.size:
            raise DimensionError(f"BatchNorm expects {self.gamma.size} features, got {x.shape}")
        axes = tuple(i for i in range(x.ndim) if i != fa)
        if not self.training:
            out, _, _ = T.batch_norm(x, self.gamma, self.beta, axes,
                                     stats=(self.running_mean, self.running_var), eps=self.eps)
            return out
        out, mu, var = T.batch_norm(x, self.gamma, self.beta, axes, mask=mask, eps=self.eps)
        if mu is not None:
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
        return out
