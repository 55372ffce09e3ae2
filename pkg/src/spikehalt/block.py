"""Spiking encoder block: softmax-free spike self-attention followed by an MLP.

Masked tokens are zeroed on the way in and on the way out, excluded from
batch-norm statistics, and their LIF membranes are frozen, so nothing a masked
token holds can reach an unmasked one.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .energy import OpCount, linear_counts, spike_matmul_sops
from .errors import ConfigError, DimensionError
from .neuron import LIFNode, LifParams
from .nn import BatchNorm, Linear, Module
from .tensor import Tensor

RESIDUAL_MODES = ("spikformer", "spikingformer")


def spiking_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, scale: float) -> Tensor:
    """``(Q K^T V) * scale`` per head on (B, K, D) spike tensors, returned as (B, K, D).

    Without a softmax the product is associative, so ``Q (K^T V)`` is used: it is
    linear in the token count.
    """
    b, n, d = q.shape
    dh = d // heads

    def split(x):
        return x.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    kv = kh.transpose(0, 1, 3, 2) @ vh
    out = (qh @ kv) * scale
    return out.transpose(0, 2, 1, 3).reshape(b, n, d)


class _SpikeLinear(Module):
    """Linear -> BatchNorm (-> LIF)."""

    def __init__(self, d_in, d_out, rng, lif: LifParams | None, name):
        self.fc = Linear(d_in, d_out, rng)
        self.bn = BatchNorm(d_out)
        self.lif = LIFNode(lif, name=f"{name}.lif") if lif is not None else None
        self.name = name

    def __call__(self, x: Tensor, m3: np.ndarray | None, counter: OpCount | None) -> Tensor:
        if counter is not None:
            f, s, nsp, slots = linear_counts(x.data, self.fc.d_out, True,
                                             None if m3 is None else m3[..., 0])
            counter.add_spiking(self.name, f, s, nsp, slots)
        y = self.bn(self.fc(x), mask=m3)
        if self.lif is None:
            return y if m3 is None else y * m3
        return self.lif(y, m3)


class Block(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: float = 4.0,
                 attn_scale: float = 0.125, lif: LifParams | None = None,
                 residual: str = "spikformer", name: str = "block"):
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
        if residual not in RESIDUAL_MODES:
            raise ConfigError(f"residual must be one of {RESIDUAL_MODES}")
        lif = lif or LifParams()
        hidden = int(dim * mlp_ratio)
        self.dim, self.heads, self.scale = dim, heads, attn_scale
        self.residual = residual
        self.name = name
        post = lif if residual == "spikformer" else None
        self.q = _SpikeLinear(dim, dim, rng, lif, f"{name}.q")
        self.k = _SpikeLinear(dim, dim, rng, lif, f"{name}.k")
        self.v = _SpikeLinear(dim, dim, rng, lif, f"{name}.v")
        self.attn_lif = LIFNode(lif, name=f"{name}.attn.lif")
        self.proj = _SpikeLinear(dim, dim, rng, post, f"{name}.proj")
        self.fc1 = _SpikeLinear(dim, hidden, rng, lif, f"{name}.fc1")
        self.fc2 = _SpikeLinear(hidden, dim, rng, post, f"{name}.fc2")
        if residual == "spikingformer":
            self.attn_in_lif = LIFNode(lif, name=f"{name}.attn_in.lif")
            self.mlp_in_lif = LIFNode(lif, name=f"{name}.mlp_in.lif")

    def _mask3(self, x: Tensor, mask) -> np.ndarray | None:
        if mask is None:
            return None
        mask = np.asarray(mask)
        if mask.shape != x.shape[:2]:
            raise DimensionError(f"mask {mask.shape} does not match tokens {x.shape[:2]}")
        return mask.astype(x.data.dtype)[..., None]

    def ssa(self, x: Tensor, m3: np.ndarray | None, counter: OpCount | None = None) -> Tensor:
        """Attention branch plus its residual."""
        s = self.attn_in_lif(x, m3) if self.residual == "spikingformer" else x
        q = self.q(s, m3, counter)
        k = self.k(s, m3, counter)
        v = self.v(s, m3, counter)
        if counter is not None:
            dh = self.dim // self.heads
            b, n, _ = q.shape
            active = n * b if m3 is None else int(m3.sum())
            counter.add_spiking(f"{self.name}.attn", 2 * active * self.dim * dh,
                                spike_matmul_sops(k.data, dh) + spike_matmul_sops(q.data, dh), 0, 0)
        a = self.attn_lif(spiking_attention(q, k, v, self.heads, self.scale), m3)
        return x + self.proj(a, m3, counter)

    def mlp(self, x: Tensor, m3: np.ndarray | None, counter: OpCount | None = None) -> Tensor:
        """MLP branch plus its residual; output feature 0 carries the halting logit."""
        s = self.mlp_in_lif(x, m3) if self.residual == "spikingformer" else x
        h = self.fc1(s, m3, counter)
        return x + self.fc2(h, m3, counter)

    def __call__(self, x: Tensor, mask=None, counter: OpCount | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise DimensionError(f"{self.name}: expected (B, K, {self.dim}) tokens, got {x.shape}")
        m3 = self._mask3(x, mask)
        if m3 is not None:
            x = x * m3
        x = self.mlp(self.ssa(x, m3, counter), m3, counter)
        return x if m3 is None else x * m3
