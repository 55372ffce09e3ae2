"""Diagnostics on trained models: token similarity, epsilon sweeps, halting maps, ablations."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, make_batches
from .halting import MODES, HaltTrace
from .model import SpikeHaltNet
from .train import evaluate


class InvariantError(RuntimeError):
    """A property that must hold on every run (e.g. sweep monotonicity) was violated."""


# -- similarity ------------------------------------------------------------------
def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity along the last axis.

    Spike vectors are often all zero: two zero vectors count as identical (1.0),
    a zero against a non-zero vector as 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = (a * b).sum(axis=-1)
    denom = na * nb
    out = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)
    return np.where((na == 0) & (nb == 0), 1.0, out)


@dataclass
class SimilarityRow:
    axis: str   # "block" (l -> l+1 at each t) or "timestep" (t -> t+1 of first-block inputs)
    index: int  # first member of the pair, 1-based
    mean_cos: float
    std: float


def block_inputs(model: SpikeHaltNet, x: np.ndarray, halting: bool = False) -> np.ndarray:
    """Token inputs to every block, shape (T, L, B, K, D)."""
    model.eval()
    with T.no_grad():
        out = model.forward(x, halting=halting, keep_inputs=True)
    return np.stack([[z.data for z in row] for row in out.block_inputs])


def similarity_rows(inputs: np.ndarray) -> list[SimilarityRow]:
    """Mean and std of consecutive-block and consecutive-timestep cosine similarity.

    ``inputs`` is (T, L, ..., D). Block pairs are pooled over timesteps; timestep
    pairs use the first block's inputs (the patch-embedding output).
    """
    n_t, n_l = inputs.shape[:2]
    rows = []
    for l in range(n_l - 1):
        c = cosine_rows(inputs[:, l], inputs[:, l + 1])
        rows.append(SimilarityRow("block", l + 1, float(c.mean()), float(c.std())))
    for t in range(n_t - 1):
        c = cosine_rows(inputs[t, 0], inputs[t + 1, 0])
        rows.append(SimilarityRow("timestep", t + 1, float(c.mean()), float(c.std())))
    return rows


def temporal_similarity(model: SpikeHaltNet, x: np.ndarray) -> float:
    """Mean cosine similarity of first-block inputs at consecutive timesteps."""
    inputs = block_inputs(model, x)
    sims = [cosine_rows(inputs[t, 0], inputs[t + 1, 0]) for t in range(inputs.shape[0] - 1)]
    return float(np.mean(sims))


def dataset_similarity(model: SpikeHaltNet, data: Dataset, normalize_with=None,
                       batch: int = 100) -> list[SimilarityRow]:
    chunks = [block_inputs(model, x) for x, _ in
              make_batches(data, batch, 0, normalize_with, shuffle=False)]
    return similarity_rows(np.concatenate(chunks, axis=2))


# -- epsilon sweep ---------------------------------------------------------------
def check_grid(grid) -> list[float]:
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty eps grid")
    if any(g < 0 for g in grid):
        raise ValueError("eps values must be >= 0")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"eps grid must be strictly increasing, got {grid}")
    return grid


def epsilon_sweep(model: SpikeHaltNet, data: Dataset, grid, normalize_with=None,
                  check: bool = True) -> list[dict]:
    """One ``evaluate`` row per eps; optionally assert tokens and energy never rise."""
    rows = []
    for eps in check_grid(grid):
        m = evaluate(model, data, eps=eps, normalize_with=normalize_with)
        rows.append({"eps": eps, "acc": m["accuracy"], "avg_tokens": m["avg_tokens"],
                     "energy": m["energy"]})
    if check:
        for prev, cur in zip(rows, rows[1:]):
            for key in ("avg_tokens", "energy"):
                if cur[key] > prev[key]:
                    raise InvariantError(f"{key} rose from {prev[key]!r} at eps={prev['eps']} "
                                         f"to {cur[key]!r} at eps={cur['eps']}")
    return rows


def halt_order(trace: HaltTrace) -> np.ndarray:
    """1-based scan-order position of each token's final halt, ``(t - 1) * L + l``."""
    return (trace.halt_t[-1] - 1) * trace.blocks + trace.halt_l[-1]


# -- halting maps ----------------------------------------------------------------
@dataclass
class HaltMap:
    counts: np.ndarray          # (K,) processed slots per token
    grid: np.ndarray            # counts on the token grid (h, w)
    halted: np.ndarray          # (T, L) tokens masked at each position
    max_count: int
    avg_tokens: float

    def pgm_pixels(self) -> np.ndarray:
        """8-bit intensities: fully processed tokens are white (255), never processed black."""
        scaled = np.rint(self.grid.astype(np.float64) * 255 / self.max_count)
        return scaled.astype(np.uint8)


def halting_map(model: SpikeHaltNet, x: np.ndarray, eps: float | None = None,
                halting: bool | None = None, accumulation: str | None = None) -> HaltMap:
    """Per-token processed counts for a single (normalised) image ``x`` of shape (C, H, W)."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError("halting_map takes a single image")
    model.eval()
    with T.no_grad():
        out = model.forward(x, eps=eps, halting=halting, accumulation=accumulation)
    tr = out.trace
    counts = tr.processed_counts()[0]
    gh, gw = model.cfg.embed_config().grid
    return HaltMap(counts, counts.reshape(gh, gw), tr.halted_per_position(),
                   tr.timesteps * tr.blocks, tr.avg_tokens())


def pgm_bytes(pixels: np.ndarray) -> bytes:
    """Binary greyscale PGM (P5, maxval 255)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(raw: bytes) -> np.ndarray:
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only maxval 255 is supported")
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


# -- ablation --------------------------------------------------------------------
def accumulation_ablation(model: SpikeHaltNet, data: Dataset, eps: float | None = None,
                          normalize_with=None, modes=MODES) -> list[dict]:
    """(mode, avg_tokens, acc) for each accumulation mode on the same frozen weights."""
    rows = []
    for mode in modes:
        m = evaluate(model, data, eps=eps, normalize_with=normalize_with, halting=True,
                     accumulation=mode)
        rows.append({"mode": mode, "avg_tokens": m["avg_tokens"], "acc": m["accuracy"]})
    return rows


# -- CSV -------------------------------------------------------------------------
def to_csv(rows, columns: list[str], comment: str | None = None) -> str:
    """CSV text with an optional leading ``# comment`` line and a header row.

    Floats use ``repr`` so they parse back to identical values.
    """
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        vals = row if isinstance(row, (list, tuple)) else [
            getattr(row, c) if not isinstance(row, dict) else row[c] for c in columns]
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in vals])
    return buf.getvalue()


def read_csv(text: str) -> tuple[list[str], list[dict]]:
    """Inverse of :func:`to_csv`: (comment lines, rows as dicts of strings)."""
    lines = text.splitlines()
    comments = [ln[2:] for ln in lines if ln.startswith("# ")]
    body = [ln for ln in lines if not ln.startswith("#")]
    return comments, list(csv.DictReader(body))
