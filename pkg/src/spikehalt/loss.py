"""Mean-field task loss, ponder loss and their weighted sum."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .halting import HaltingTensors, HaltTrace
from .tensor import Tensor

NORMALIZERS = ("TK", "K")


@dataclass
class LossReport:
    task_loss: float
    ponder_loss: float
    overall: float
    delta_p: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _slots(x, name: str) -> list:
    if isinstance(x, (list, tuple)):
        return list(x)
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if x.ndim < 3:
        raise DimensionError(f"{name} needs leading (T, L) axes")
    flat = x.reshape((-1,) + x.shape[2:])
    return [flat[i] for i in range(flat.shape[0])]


def mean_field_state(outputs, p, timesteps: int, normalizer: str = "TK") -> Tensor:
    """Probability-weighted token states, summed over positions and tokens.

    ``outputs`` are block outputs (B, K, D) and ``p`` halting probabilities (B, K),
    either as scan-ordered lists or arrays with leading (T, L) axes. Returns (B, D)
    scaled by ``1 / (T*K)`` (or ``1 / K``).
    """
    outs = [o if isinstance(o, Tensor) else Tensor(np.asarray(o)) for o in _slots(outputs, "outputs")]
    probs = [q if isinstance(q, Tensor) else Tensor(np.asarray(q)) for q in _slots(p, "p")]
    if len(outs) != len(probs):
        raise DimensionError(f"{len(outs)} output positions but {len(probs)} probability positions")
    if outs[0].shape[:-1] != probs[0].shape:
        raise DimensionError(f"token shape {outs[0].shape[:-1]} vs probability shape {probs[0].shape}")
    if normalizer not in NORMALIZERS:
        raise ValueError(f"normalizer must be one of {NORMALIZERS}")
    k = outs[0].shape[-2]
    acc = None
    for o, q in zip(outs, probs):
        term = o * q.reshape(q.shape + (1,))
        acc = term if acc is None else acc + term
    scale = 1.0 / (timesteps * k) if normalizer == "TK" else 1.0 / k
    return acc.sum(axis=-2) * scale


def mean_field_logits(outputs, p, weight: Tensor, bias: Tensor | None, timesteps: int,
                      normalizer: str = "TK") -> Tensor:
    state = mean_field_state(outputs, p, timesteps, normalizer)
    return T.linear(state, weight if isinstance(weight, Tensor) else Tensor(np.asarray(weight)),
                    bias if bias is None or isinstance(bias, Tensor) else Tensor(np.asarray(bias)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch with log-sum-exp stabilisation."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"logits {logits.shape} vs {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.size), labels]
    return -picked.mean()


task_loss = cross_entropy


def ponder_loss(halt: HaltingTensors, timesteps: int, blocks: int, tokens: int,
                pre_halt: str = "zero") -> Tensor:
    """Average over samples of ``1/(T*K) * sum (N + r)`` at each halt.

    Only the halting timestep of each segment contributes. With
    ``pre_halt="full"`` every whole timestep a token spends before its halting
    timestep adds ``L`` as well.
    """
    total = None
    for seg, r in enumerate(halt.r_halt):
        n = halt.n_halt[seg].astype(r.data.dtype)
        if pre_halt == "full" and len(halt.r_halt) == 1:
            n = n + blocks * (halt.t_halt[seg] - 1).astype(r.data.dtype)
        elif pre_halt not in ("zero", "full"):
            raise ValueError("pre_halt must be 'zero' or 'full'")
        term = (r + n).sum(axis=-1)
        total = term if total is None else total + term
    per_sample = total * (1.0 / (timesteps * tokens))
    return per_sample.mean() if per_sample.ndim else per_sample


def ponder_loss_from_trace(trace: HaltTrace, clamp: bool = True, pre_halt: str = "zero") -> float:
    """Numpy ponder loss from a finished trace; token arrays (B, K) or (K,)."""
    n_t, n_l = trace.timesteps, trace.blocks
    r = trace.r_at_halt
    if clamp:
        r = np.where(r < 0, 0, r)
    n = trace.halt_l.astype(r.dtype)
    if pre_halt == "full" and trace.halt_t.shape[0] == 1:
        n = n + n_l * (trace.halt_t - 1)
    per_token = (n + r).sum(axis=0)
    k = per_token.shape[-1]
    per_sample = per_token.sum(axis=-1) / (n_t * k)
    return float(np.mean(per_sample))


def overall_loss(task, ponder, delta_p: float):
    """``task + delta_p * ponder``."""
    return task + ponder * delta_p
