"""Patch-splitting front ends that turn an image into per-timestep spike tokens.

``vanilla_sps`` re-runs the whole conv/BN/LIF stack every timestep.
``i_sps`` runs the conv/BN stack once on the image and lets the terminal LIF
layer integrate that fixed drive for ``T`` steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .energy import OpCount, conv_counts
from .errors import ConfigError, DimensionError
from .neuron import LIFNode, LifParams
from .nn import BatchNorm, Conv2d, Module
from .tensor import Tensor

MODES = ("vanilla_sps", "i_sps")


@dataclass
class PatchEmbedConfig:
    in_channels: int = 3
    image_size: tuple[int, int] = (32, 32)
    embed_dim: int = 128
    # (out_channels, kernel, stride, pooling)
    conv_stages: list[tuple[int, int, int, bool]] = field(
        default_factory=lambda: [(32, 3, 1, True), (128, 3, 1, True)])
    mode: str = "i_sps"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"embed mode must be one of {MODES}, got {self.mode!r}")
        self.conv_stages = [tuple(s) for s in self.conv_stages]
        if not self.conv_stages:
            raise ConfigError("at least one conv stage is required")
        if self.conv_stages[-1][0] != self.embed_dim:
            raise ConfigError("final conv stage must output embed_dim channels")
        self.grid  # validates spatial arithmetic

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.image_size
        for _, k, s, pool in self.conv_stages:
            h = (h + 2 * (k // 2) - k) // s + 1
            w = (w + 2 * (k // 2) - k) // s + 1
            if pool:
                if h % 2 or w % 2:
                    raise ConfigError(f"pooling needs even spatial size, got {h}x{w}")
                h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ConfigError("conv stack collapses the image")
        return h, w

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w


class _Stage(Module):
    def __init__(self, c_in, c_out, kernel, stride, pool, rng, lif: LifParams, name):
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, padding=kernel // 2)
        self.bn = BatchNorm(c_out, feature_axis=1)
        self.lif = LIFNode(lif, name=f"{name}.lif")
        self.pool = pool
        self.name = name
        self.kernel, self.stride = kernel, stride
        self.c_out = c_out

    def drive(self, x: Tensor, counter: OpCount | None, spiking: bool) -> Tensor:
        if counter is not None:
            f, s, nsp, slots = conv_counts(x.data, self.c_out, self.kernel, self.stride,
                                           self.kernel // 2, spiking)
            if spiking:
                counter.add_spiking(f"{self.name}.conv", f, s, nsp, slots)
            else:
                counter.add_dense(f"{self.name}.conv", f)
        return self.bn(self.conv(x))

    def fire(self, drive: Tensor) -> Tensor:
        s = self.lif(drive)
        return T.max_pool2d(s, 2) if self.pool else s


class PatchEmbed(Module):
    def __init__(self, cfg: PatchEmbedConfig, rng: np.random.Generator, lif: LifParams | None = None):
        self.cfg = cfg
        lif = lif or LifParams()
        self.stages = []
        c_in = cfg.in_channels
        for i, (c_out, k, s, pool) in enumerate(cfg.conv_stages):
            self.stages.append(_Stage(c_in, c_out, k, s, pool, rng, lif, f"embed.{i}"))
            c_in = c_out
        self.conv_passes = 0

    @property
    def num_tokens(self) -> int:
        return self.cfg.num_tokens

    def _to_tokens(self, s: Tensor) -> Tensor:
        b, d, h, w = s.shape
        return s.reshape(b, d, h * w).transpose(0, 2, 1)

    def _check(self, x: Tensor):
        c = self.cfg
        if x.ndim != 4 or x.shape[1] != c.in_channels or tuple(x.shape[2:]) != tuple(c.image_size):
            raise DimensionError(f"expected (B, {c.in_channels}, {c.image_size[0]}, "
                                 f"{c.image_size[1]}) input, got {x.shape}")

    def forward(self, x: Tensor, timesteps: int, counter: OpCount | None = None,
                mode: str | None = None) -> list[Tensor]:
        """Return ``timesteps`` token tensors of shape (B, K, D)."""
        self._check(x)
        mode = mode or self.cfg.mode
        if mode == "vanilla_sps":
            return [self._vanilla_step(x, counter) for _ in range(timesteps)]
        if mode != "i_sps":
            raise ConfigError(f"unknown embed mode {mode!r}")
        h = x
        for i, st in enumerate(self.stages[:-1]):
            h = st.fire(st.drive(h, counter, spiking=i > 0))
        last = self.stages[-1]
        drive = last.drive(h, counter, spiking=len(self.stages) > 1)
        self.conv_passes += 1
        return [self._to_tokens(last.fire(drive)) for _ in range(timesteps)]

    def _vanilla_step(self, x: Tensor, counter) -> Tensor:
        h = x
        for i, st in enumerate(self.stages):
            h = st.fire(st.drive(h, counter, spiking=i > 0))
        self.conv_passes += 1
        return self._to_tokens(h)

    def conv_calls(self) -> int:
        return sum(st.conv.calls for st in self.stages)
