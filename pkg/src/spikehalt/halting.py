"""Two-dimensional token halting over (timestep, block) scan order.

Positions are visited with the timestep outer and the block inner; both indices
are 1-based. Each token accumulates ``h`` from every block output it produces.
After a block, tokens whose running total reaches ``1 - eps`` are masked from the
next scanned position on; the position they are masked at is their halt position
and receives the remainder ``1 - H`` as halting probability. Tokens still active
at the final position are force-halted there.

``mode="block_only"`` restarts the accumulation (and unmasks every token) at each
timestep, which gives one halt per token per timestep.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import SequencingError
from .tensor import Tensor

MODES = ("two_dimensional", "block_only")


def halting_score(tokens, alpha: float, beta: float, mask=None):
    """``sigmoid(alpha * tokens[..., 0] + beta)``; masked tokens score 0.

    Accepts a :class:`Tensor` (differentiable result) or an array.
    """
    if isinstance(tokens, Tensor):
        h = T.sigmoid(tokens[..., 0] * alpha + beta)
        if mask is not None:
            h = h * np.asarray(mask, dtype=h.data.dtype)
        return h
    x = np.asarray(tokens)
    h = T._sigmoid_np(alpha * x[..., 0] + beta)
    if mask is not None:
        h = h * np.asarray(mask, dtype=h.dtype)
    return h


class HaltState:
    """Running halting bookkeeping for a set of tokens (any array shape).

    ``masked`` always describes the *next* position to be scanned.
    ``halt_t``/``halt_l`` hold the 1-based halt position per segment (0 while
    undecided) and ``r_at_halt`` the unclamped remainder there.
    """

    def __init__(self, shape, timesteps: int, blocks: int, eps: float,
                 mode: str = "two_dimensional", dtype=np.float32):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if eps < 0:
            raise ValueError("eps must be >= 0")
        self.shape = tuple(shape)
        self.T, self.L = timesteps, blocks
        self.eps = eps
        self.threshold = dtype(1.0 - eps)
        self.mode = mode
        self.dtype = dtype
        self.H = np.zeros(shape, dtype=dtype)
        self.masked = np.zeros(shape, dtype=bool)
        n_seg = timesteps if mode == "block_only" else 1
        self.halt_t = np.zeros((n_seg,) + self.shape, dtype=np.int64)
        self.halt_l = np.zeros((n_seg,) + self.shape, dtype=np.int64)
        self.r_at_halt = np.zeros((n_seg,) + self.shape, dtype=dtype)
        self.forced = np.zeros((n_seg,) + self.shape, dtype=bool)
        self._pos = 0  # scan positions consumed
        self.last_H = self.H  # running total right after the latest update

    @property
    def active(self) -> np.ndarray:
        return ~self.masked

    @property
    def segment_len(self) -> int:
        return self.L if self.mode == "block_only" else self.T * self.L

    def accumulate(self, h: np.ndarray, t: int, l: int) -> np.ndarray:
        """Fold in the scores of block ``l`` at timestep ``t``; return newly masked tokens."""
        expected = (self._pos // self.L + 1, self._pos % self.L + 1)
        if (t, l) != expected:
            raise SequencingError(f"halting update for (t={t}, l={l}) but expected {expected}")
        h = np.asarray(h, dtype=self.dtype)
        if h.shape != self.shape:
            raise ValueError(f"scores of shape {h.shape} for state {self.shape}")
        self._pos += 1
        seg = (t - 1) if self.mode == "block_only" else 0
        act = ~self.masked
        if self._pos % self.segment_len == 0:
            # final position of the segment: everyone still running halts here
            self.halt_t[seg][act] = t
            self.halt_l[seg][act] = l
            self.r_at_halt[seg][act] = 1 - self.H[act]
            self.forced[seg][act] = True
            self.H = self.H + np.where(act, h, 0)
            self.last_H = self.H
            newly = act.copy()
            if self.mode == "block_only" and t < self.T:
                self.H = np.zeros(self.shape, dtype=self.dtype)
                self.masked = np.zeros(self.shape, dtype=bool)
            else:
                self.masked = self.masked | act
            return newly
        self.H = self.H + np.where(act, h, 0)
        self.last_H = self.H
        newly = act & (self.H >= self.threshold)
        if newly.any():
            nt, nl = (t, l + 1) if l < self.L else (t + 1, 1)
            self.halt_t[seg][newly] = nt
            self.halt_l[seg][newly] = nl
            self.r_at_halt[seg][newly] = 1 - self.H[newly]
            self.masked = self.masked | newly
        return newly


@dataclass
class HaltTrace:
    """Per-position record of a complete scan; arrays are indexed [t-1, l-1, ...]."""

    h: np.ndarray
    H: np.ndarray
    p: np.ndarray
    processed: np.ndarray
    halt_t: np.ndarray
    halt_l: np.ndarray
    r_at_halt: np.ndarray
    forced: np.ndarray
    mode: str = "two_dimensional"
    eps: float = 0.01

    @property
    def timesteps(self) -> int:
        return self.h.shape[0]

    @property
    def blocks(self) -> int:
        return self.h.shape[1]

    def avg_tokens(self, axis=None) -> np.ndarray | float:
        """Fraction of (token, block, timestep) slots processed.

        With token arrays shaped (B, K), ``axis=0`` gives one value per sample.
        """
        if axis is None:
            return 1 - int((~self.processed).sum()) / self.processed.size
        frac = self.processed.mean(axis=(0, 1))
        other = tuple(i for i in range(frac.ndim) if i != axis)
        return frac.mean(axis=other) if other else frac

    def processed_counts(self) -> np.ndarray:
        """Number of processed slots per token (max ``T * L``)."""
        return self.processed.sum(axis=(0, 1))

    def halted_per_position(self) -> np.ndarray:
        """Count of tokens masked at each (t, l), summed over remaining axes."""
        masked = ~self.processed
        return masked.reshape(masked.shape[0], masked.shape[1], -1).sum(axis=-1)

    def mask_events(self) -> list[tuple]:
        """(token index..., t, l) for every non-forced halt."""
        out = []
        for seg in range(self.halt_t.shape[0]):
            sel = (self.halt_t[seg] > 0) & ~self.forced[seg]
            for idx in zip(*np.nonzero(sel)):
                out.append(tuple(int(i) for i in idx) + (int(self.halt_t[seg][idx]),
                                                          int(self.halt_l[seg][idx])))
        return out

    def halt_index(self) -> np.ndarray:
        """Block index where each token halts, per timestep (0 = no halt that timestep).

        Shape (T, ...token shape).
        """
        out = np.zeros((self.timesteps,) + self.h.shape[2:], dtype=np.int64)
        for seg in range(self.halt_t.shape[0]):
            for t in range(1, self.timesteps + 1):
                sel = self.halt_t[seg] == t
                out[t - 1][sel] = self.halt_l[seg][sel]
        return out

    def to_csv(self, sample: int | None = None, header_comment: str | None = None) -> str:
        """Rows ``t, l, k, h, H, p, masked``; with (B, K) tokens pick one ``sample``."""
        h, H, p, proc = self.h, self.H, self.p, self.processed
        if h.ndim == 4:
            sel = 0 if sample is None else sample
            h, H, p, proc = h[:, :, sel], H[:, :, sel], p[:, :, sel], proc[:, :, sel]
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "l", "k", "h", "H", "p", "masked"])
        for t in range(h.shape[0]):
            for l in range(h.shape[1]):
                for k in range(h.shape[2]):
                    w.writerow([t + 1, l + 1, k, repr(float(h[t, l, k])), repr(float(H[t, l, k])),
                                repr(float(p[t, l, k])), int(not proc[t, l, k])])
        return buf.getvalue()


def scan(h: np.ndarray, eps: float, mode: str = "two_dimensional", clamp: bool = True) -> HaltTrace:
    """Run the halting scan over a full score grid ``h`` of shape (T, L, ...).

    Scores at positions where a token is already masked are ignored (treated as 0).
    """
    h = np.asarray(h)
    dtype = h.dtype.type if h.dtype in (np.float32, np.float64) else np.float64
    h = h.astype(dtype)
    n_t, n_l = h.shape[:2]
    tok_shape = h.shape[2:]
    st = HaltState(tok_shape, n_t, n_l, eps, mode, dtype)
    h_eff = np.zeros_like(h)
    H = np.zeros_like(h)
    processed = np.zeros(h.shape, dtype=bool)
    for t in range(1, n_t + 1):
        for l in range(1, n_l + 1):
            act = st.active
            processed[t - 1, l - 1] = act
            h_eff[t - 1, l - 1] = np.where(act, h[t - 1, l - 1], 0)
            st.accumulate(h_eff[t - 1, l - 1], t, l)
            H[t - 1, l - 1] = st.last_H
    trace = HaltTrace(h_eff, H, np.zeros_like(h), processed, st.halt_t, st.halt_l,
                      st.r_at_halt, st.forced, mode, eps)
    trace.p = probabilities_from_state(h_eff, st, clamp)
    return trace


def probabilities_from_state(h: np.ndarray, st: HaltState, clamp: bool = True) -> np.ndarray:
    """Halting probabilities for a finished scan (numpy, no gradients)."""
    n_t, n_l = h.shape[:2]
    p = np.zeros_like(h)
    seg_len = st.segment_len
    n_seg = st.halt_t.shape[0]
    for seg in range(n_seg):
        halt_pos = (st.halt_t[seg] - 1) * n_l + (st.halt_l[seg] - 1)
        pre = np.zeros(h.shape[2:], dtype=h.dtype)
        total = np.zeros(h.shape[2:], dtype=h.dtype)
        clamped = np.zeros(h.shape[2:], dtype=bool)
        for s in range(seg * seg_len, (seg + 1) * seg_len):
            t, l = divmod(s, n_l)
            before = s < halt_pos
            at = s == halt_pos
            r = 1 - pre
            if clamp:
                clamped |= at & (r < 0)
                r = np.where(r < 0, 0, r)
            val = np.where(before, h[t, l], np.where(at, r, 0)).astype(h.dtype)
            p[t, l] = val
            total = total + val
            pre = pre + h[t, l]
        if clamp and clamped.any():
            for s in range(seg * seg_len, (seg + 1) * seg_len):
                t, l = divmod(s, n_l)
                p[t, l] = np.where(clamped, p[t, l] / np.where(clamped, total, 1), p[t, l])
    return p


def halt_index(h: np.ndarray, eps: float, mode: str = "two_dimensional") -> np.ndarray:
    """Block index of the halt within each timestep, shape (T, ...); 0 where none."""
    return scan(h, eps, mode).halt_index()


def remainder(H):
    """``1 - H`` for accumulated scores ``H`` (array or Tensor)."""
    return 1 - H


def halting_probabilities(h: np.ndarray, eps: float, mode: str = "two_dimensional",
                          clamp: bool = True) -> np.ndarray:
    """Probability grid (T, L, ...) with one unit of mass per token per segment."""
    return scan(h, eps, mode, clamp).p


@dataclass
class HaltingTensors:
    """Differentiable halting quantities produced alongside a forward pass."""

    p: list[Tensor]                     # one (token-shaped) tensor per scan position
    r_halt: list[Tensor]                # clamped remainder at halt, one per segment
    n_halt: np.ndarray                  # (n_seg, ...) block index of the halt
    t_halt: np.ndarray                  # (n_seg, ...) timestep of the halt
    extra: dict = field(default_factory=dict)


def probability_tensors(h_slots: list[Tensor], st: HaltState, clamp: bool = True) -> HaltingTensors:
    """Differentiable counterpart of :func:`probabilities_from_state`.

    ``h_slots`` holds the (already masked) score tensors in scan order. The running
    sums are built in the same order as :class:`HaltState` so decisions and values
    agree exactly.
    """
    n_l = st.L
    seg_len = st.segment_len
    p: list[Tensor | None] = [None] * len(h_slots)
    r_halt = []
    for seg in range(st.halt_t.shape[0]):
        halt_pos = (st.halt_t[seg] - 1) * n_l + (st.halt_l[seg] - 1)
        pre = None
        seg_p = []
        r_acc = None
        clamped = np.zeros(st.shape, dtype=bool)
        for s in range(seg * seg_len, (seg + 1) * seg_len):
            h = h_slots[s]
            dt = h.data.dtype
            before = (s < halt_pos).astype(dt)
            at = s == halt_pos
            r = 1 - pre if pre is not None else T.Tensor(np.ones(st.shape, dtype=dt))
            if clamp:
                neg = at & (r.data < 0)
                clamped |= neg
                r = r * (~neg).astype(dt)
            r_at = r * at.astype(dt)
            val = h * before + r_at
            r_acc = r_at if r_acc is None else r_acc + r_at
            seg_p.append(val)
            pre = h if pre is None else pre + h
        if clamp and clamped.any():
            total = seg_p[0]
            for v in seg_p[1:]:
                total = total + v
            denom = total * clamped.astype(total.data.dtype) + (~clamped).astype(total.data.dtype)
            seg_p = [v / denom for v in seg_p]
        for i, v in enumerate(seg_p):
            p[seg * seg_len + i] = v
        r_halt.append(r_acc)
    return HaltingTensors(p=p, r_halt=r_halt, n_halt=st.halt_l.copy(), t_halt=st.halt_t.copy())
