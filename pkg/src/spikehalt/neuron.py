"""Leaky integrate-and-fire dynamics with a sigmoid surrogate gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, _sigmoid_np


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_scale: float = 4.0

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if not self.v_threshold > self.v_reset:
            raise ConfigError("v_threshold must exceed v_reset")


@dataclass
class LifState:
    v: Tensor


def surrogate_grad(v_minus_th: np.ndarray, scale: float) -> np.ndarray:
    """Derivative of ``sigmoid(scale * u)`` used in place of the Heaviside derivative."""
    s = _sigmoid_np(scale * v_minus_th)
    return scale * s * (1.0 - s)


def spike_fn(u: Tensor, scale: float = 4.0, relaxed: bool = False) -> Tensor:
    """Heaviside spike ``[u >= 0]`` with surrogate backward.

    In relaxed mode the forward is the smooth ``sigmoid(scale * u)`` itself, so the
    recorded gradient is exact and finite differences can check it.
    """
    if relaxed:
        y = _sigmoid_np(scale * u.data)
    else:
        y = (u.data >= 0).astype(u.data.dtype)

    def backward():
        u._accum(out.grad * surrogate_grad(u.data, scale))

    out = Tensor._result(y, (u,), backward)
    return out


def lif_step(state: LifState, drive: Tensor, params: LifParams, relaxed: bool = False,
             keep: np.ndarray | None = None) -> tuple[Tensor, LifState]:
    """One charge/fire/reset update.

    ``v' = v + (drive - (v - v_reset)) / tau``; spikes where ``v' >= v_threshold``;
    fired positions are hard-reset to ``v_reset``. Where ``keep`` is 0 the old
    membrane is carried over unchanged and no spike is emitted.

    The update is recorded as two fused nodes (spikes and new membrane) rather
    than one node per arithmetic op.
    """
    v = state.v
    if v.shape != drive.shape:
        raise DimensionError(f"LIF state {v.shape} and drive {drive.shape} differ")
    inv_tau = 1.0 / params.tau
    vr, th, scale = params.v_reset, params.v_threshold, params.surrogate_scale
    charged = v.data + (drive.data - (v.data - vr)) * inv_tau
    u = charged - th
    if relaxed:
        s = _sigmoid_np(scale * u)
        sg = scale * s * (1.0 - s)
    else:
        s = (u >= 0).astype(u.dtype)
        sg = None
    v_new = charged * (1.0 - s) + s * vr
    s_raw = s
    if keep is not None:
        s = s * keep
        v_new = v_new * keep + v.data * (1.0 - keep)
    cache = {}

    def surrogate():
        if "sg" not in cache:
            cache["sg"] = sg if sg is not None else surrogate_grad(u, scale)
        return cache["sg"]

    def to_parents(dc, extra_v=None):
        if v.requires_grad:
            gv = dc * (1.0 - inv_tau)
            if extra_v is not None:
                gv += extra_v
            v._accum(gv, fresh=True)
        if drive.requires_grad:
            drive._accum(dc * inv_tau, fresh=True)

    def back_s():
        g = out_s.grad * surrogate()
        if keep is not None:
            g *= keep
        to_parents(g)

    def back_v():
        g = out_v.grad
        dc = g * ((1.0 - s_raw) + (vr - charged) * surrogate())
        if keep is not None:
            dc *= keep
            to_parents(dc, g * (1.0 - keep))
        else:
            to_parents(dc)

    out_s = Tensor._result(s, (v, drive), back_s)
    out_v = Tensor._result(v_new, (v, drive), back_v)
    return out_s, LifState(out_v)


class LIFNode:
    """Stateful LIF layer; the membrane potential persists until :meth:`reset`.

    An optional 0/1 ``mask`` (broadcast against the drive) freezes the membrane
    of masked positions and silences their spikes.
    """

    def __init__(self, params: LifParams | None = None, name: str = "lif"):
        self.params = params or LifParams()
        self.name = name
        self.relaxed = False
        self.v: Tensor | None = None

    def reset(self) -> None:
        self.v = None

    def __call__(self, drive: Tensor, mask: np.ndarray | None = None) -> Tensor:
        p = self.params
        if self.v is None:
            self.v = Tensor(np.full(drive.shape, p.v_reset, dtype=drive.data.dtype))
        elif self.v.shape != drive.shape:
            raise DimensionError(f"{self.name}: drive {drive.shape} vs state {self.v.shape}")
        keep = None
        if mask is not None:
            keep = np.broadcast_to(mask, drive.shape).astype(drive.data.dtype)
        s, new = lif_step(LifState(self.v), drive, p, self.relaxed, keep)
        self.v = new.v
        return s


def reset_states(model) -> None:
    """Set every LIF membrane in ``model`` back to rest."""
    for node in iter_lif_nodes(model):
        node.reset()


def iter_lif_nodes(obj, _seen=None):
    if _seen is None:
        _seen = set()
    if id(obj) in _seen:
        return
    _seen.add(id(obj))
    if isinstance(obj, LIFNode):
        yield obj
        return
    children = obj.__dict__.values() if hasattr(obj, "__dict__") else ()
    for child in children:
        if isinstance(child, (list, tuple)):
            for c in child:
                yield from iter_lif_nodes(c, _seen)
        elif hasattr(child, "__dict__") and not isinstance(child, (Tensor, np.ndarray, type)):
            yield from iter_lif_nodes(child, _seen)
