"""Synaptic-operation / MAC accounting and energy estimates.

Real-valued inputs (the first convolution on pixels, the classifier head) cost one
multiply-accumulate per weight use. Spike-driven layers cost one accumulate per
incoming spike per outgoing connection. Batch-norm and residual additions are not
counted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

E_MAC_PJ = 4.6
E_AC_PJ = 0.9


@dataclass
class LayerCount:
    name: str
    flops: int = 0          # dense multiply-accumulates executed
    macs: int = 0           # real-valued MACs (priced at e_mac)
    sops: int = 0           # spike-driven accumulates (priced at e_ac)
    in_spikes: int = 0
    in_slots: int = 0

    @property
    def spike_rate(self) -> float:
        return self.in_spikes / self.in_slots if self.in_slots else 0.0


@dataclass
class OpCount:
    layers: dict[str, LayerCount] = field(default_factory=dict)

    def _layer(self, name: str) -> LayerCount:
        if name not in self.layers:
            self.layers[name] = LayerCount(name)
        return self.layers[name]

    def add_dense(self, name: str, flops: int) -> None:
        lc = self._layer(name)
        lc.flops += int(flops)
        lc.macs += int(flops)

    def add_spiking(self, name: str, flops: int, sops: int, in_spikes: int, in_slots: int) -> None:
        lc = self._layer(name)
        lc.flops += int(flops)
        lc.sops += int(sops)
        lc.in_spikes += int(in_spikes)
        lc.in_slots += int(in_slots)

    @property
    def total_macs(self) -> int:
        return sum(lc.macs for lc in self.layers.values())

    @property
    def total_sops(self) -> int:
        return sum(lc.sops for lc in self.layers.values())

    @property
    def total_flops(self) -> int:
        return sum(lc.flops for lc in self.layers.values())

    @property
    def conv_flops(self) -> int:
        """Dense-equivalent multiply-accumulates of every convolution."""
        return sum(lc.flops for name, lc in self.layers.items() if ".conv" in name)

    @property
    def conv_macs(self) -> int:
        """Real-valued multiply-accumulates of convolutions (those fed by pixels, not spikes)."""
        return sum(lc.macs for name, lc in self.layers.items() if ".conv" in name)

    def merge(self, other: "OpCount") -> "OpCount":
        for name, lc in other.layers.items():
            mine = self._layer(name)
            mine.flops += lc.flops
            mine.macs += lc.macs
            mine.sops += lc.sops
            mine.in_spikes += lc.in_spikes
            mine.in_slots += lc.in_slots
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "flops", "macs", "sops", "spike_rate"])
        for lc in self.layers.values():
            w.writerow([lc.name, lc.flops, lc.macs, lc.sops, repr(lc.spike_rate)])
        return buf.getvalue()


def linear_counts(x: np.ndarray, d_out: int, spiking: bool,
                  active: np.ndarray | None = None) -> tuple[int, int, int, int]:
    """(flops, sops, in_spikes, in_slots) for a token-wise linear layer.

    ``x`` is (..., d_in); ``active`` marks rows that are actually computed.
    Integer-valued spike sums count one accumulate per unit of input.
    """
    d_in = x.shape[-1]
    rows = x.reshape(-1, d_in)
    if active is not None:
        rows = rows[np.broadcast_to(active, x.shape[:-1]).reshape(-1).astype(bool)]
    n_rows = rows.shape[0]
    flops = n_rows * d_in * d_out
    if not spiking:
        return flops, 0, 0, 0
    spikes = int(np.rint(rows.sum(dtype=np.float64)))
    return flops, spikes * d_out, spikes, n_rows * d_in


def spike_matmul_sops(a: np.ndarray, n_cols_b: int) -> int:
    """Accumulates for ``a @ b`` with spike-valued ``a``: each spike adds one row of ``b``."""
    return int(np.rint(a.sum(dtype=np.float64))) * n_cols_b


def conv_counts(x: np.ndarray, c_out: int, kernel: int, stride: int, padding: int,
                spiking: bool) -> tuple[int, int, int, int]:
    """Exact (flops, sops, in_spikes, in_slots) for a conv on NCHW input ``x``."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    flops = n * ho * wo * c_out * c * kernel * kernel
    if not spiking:
        return flops, 0, 0, 0
    # count, for every output location, the spikes inside its receptive field
    per_pos = x.sum(axis=1, dtype=np.float64)
    if padding:
        per_pos = np.pad(per_pos, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(per_pos, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    touched = int(np.rint(win.sum()))
    spikes = int(np.rint(x.sum(dtype=np.float64)))
    return flops, touched * c_out, spikes, x.size


def estimate_energy(counts: OpCount, e_mac: float = E_MAC_PJ, e_ac: float = E_AC_PJ) -> float:
    """Energy in joules: ``e_mac * MACs + e_ac * ACs`` with constants given in pJ."""
    if e_mac < 0 or e_ac < 0:
        raise ValueError("energy constants must be non-negative")
    return (e_mac * counts.total_macs + e_ac * counts.total_sops) * 1e-12


def count_ops(model, x, **forward_kw) -> OpCount:
    """Per-layer counts for one inference pass of ``model`` on the batch ``x``."""
    from .tensor import no_grad

    was_training = model.training
    model.eval()
    try:
        with no_grad():
            return model.forward(x, count=True, **forward_kw).ops
    finally:
        model.train(was_training)
