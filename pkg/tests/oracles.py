"""Slow, loop-based reference implementations used to check the vectorised code.

Nothing here imports the package under test.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d(x, w, stride=1, padding=0):
    """Direct 7-loop convolution, NCHW input and (C_out, C_in, k, k) weights."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for cc in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, cc, i * stride + di, j * stride + dj] * w[o, cc, di, dj]
                    out[b, o, i, j] = acc
    return out


def conv_sops(x, c_out, k, stride, padding):
    """Accumulates of a spike-driven conv: every input spike times the outputs it feeds."""
    n, c, h, wd = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    total = 0
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for cc in range(c):
                    for di in range(k):
                        for dj in range(k):
                            y, xx = i * stride + di - padding, j * stride + dj - padding
                            if 0 <= y < h and 0 <= xx < wd:
                                total += int(x[b, cc, y, xx])
    return total * c_out


def lif_run(drives, tau=2.0, v_th=1.0, v_reset=0.0):
    """Scalar LIF over a sequence of drives; returns (spikes, potentials)."""
    v = v_reset
    spikes, vs = [], []
    for d in drives:
        v = v + (d - (v - v_reset)) / tau
        s = 1 if v >= v_th else 0
        if s:
            v = v_reset
        spikes.append(s)
        vs.append(v)
    return spikes, vs


def attention(q, k, v, scale):
    """Softmax-free attention for one head, (n, d) each: ``(q @ k.T) @ v * scale``."""
    n = q.shape[0]
    d = v.shape[1]
    out = np.zeros((n, d))
    for i in range(n):
        for j in range(n):
            a = sum(q[i, c] * k[j, c] for c in range(q.shape[1]))
            out[i] += a * v[j]
    return out * scale


def halting_scan(h, eps, mode="two_dimensional", clamp=True):
    """Per-token scan straight from the definitions.

    ``h`` is (T, L, K). Returns dict with
      halt: list per token of (segment -> (t, l, forced))
      r: (n_seg, K) unclamped remainders at halt
      p: (T, L, K) probabilities
      processed: (T, L, K) bools
      H: (T, L, K) running totals recorded after each position (frozen once masked)
      index: (T, K) block index of a halt within each timestep, 0 if none
    """
    n_t, n_l, n_k = h.shape
    thr = 1.0 - eps
    positions = [(t, l) for t in range(1, n_t + 1) for l in range(1, n_l + 1)]
    segments = [positions] if mode == "two_dimensional" else \
        [[(t, l) for l in range(1, n_l + 1)] for t in range(1, n_t + 1)]
    n_seg = len(segments)
    p = np.zeros(h.shape)
    processed = np.zeros(h.shape, dtype=bool)
    H_rec = np.zeros(h.shape)
    r_out = np.zeros((n_seg, n_k))
    index = np.zeros((n_t, n_k), dtype=np.int64)
    halts = [[None] * n_seg for _ in range(n_k)]
    for k in range(n_k):
        for si, seg in enumerate(segments):
            H = 0.0
            halt_at = None
            r = None
            vals = {}
            for i, (t, l) in enumerate(seg):
                if halt_at is not None:
                    if (t, l) == halt_at:
                        vals[(t, l)] = r
                    else:
                        vals[(t, l)] = 0.0
                    H_rec[t - 1, l - 1, k] = H
                    continue
                processed[t - 1, l - 1, k] = True
                hv = float(h[t - 1, l - 1, k])
                if i == len(seg) - 1:
                    r = 1.0 - H
                    vals[(t, l)] = r
                    halt_at = (t, l)
                    halts[k][si] = (t, l, True)
                    H = H + hv
                    H_rec[t - 1, l - 1, k] = H
                    break
                vals[(t, l)] = hv
                H = H + hv
                H_rec[t - 1, l - 1, k] = H
                if H >= thr:
                    halt_at = seg[i + 1]
                    r = 1.0 - H
                    halts[k][si] = (halt_at[0], halt_at[1], False)
            r_out[si, k] = r
            index[halt_at[0] - 1, k] = halt_at[1]
            r_used = max(r, 0.0) if clamp else r
            vals[halt_at] = r_used
            total = sum(vals.values())
            for (t, l), v in vals.items():
                p[t - 1, l - 1, k] = v / total if (clamp and r < 0) else v
    return {"halt": halts, "r": r_out, "p": p, "processed": processed, "H": H_rec, "index": index}


def mean_field(outputs, p, weight, bias, timesteps, normalizer="TK"):
    """``outputs`` (T, L, B, K, D), ``p`` (T, L, B, K): explicit loops over t, l, k."""
    n_t, n_l, b, n_k, d = outputs.shape
    state = np.zeros((b, d))
    for s in range(b):
        for t in range(n_t):
            for l in range(n_l):
                for k in range(n_k):
                    for c in range(d):
                        state[s, c] += outputs[t, l, s, k, c] * p[t, l, s, k]
    state /= (timesteps * n_k) if normalizer == "TK" else n_k
    logits = np.zeros((b, weight.shape[1]))
    for s in range(b):
        for j in range(weight.shape[1]):
            logits[s, j] = sum(state[s, c] * weight[c, j] for c in range(d)) + bias[j]
    return logits


def ponder(halt_l, r, timesteps, clamp=True):
    """``halt_l``/``r``: (B, K) halt block index and unclamped remainder at the single halt."""
    b, n_k = halt_l.shape
    total = 0.0
    for s in range(b):
        acc = 0.0
        for k in range(n_k):
            rr = max(r[s, k], 0.0) if clamp else r[s, k]
            acc += halt_l[s, k] + rr
        total += acc / (timesteps * n_k)
    return total / b


def cross_entropy(logits, labels):
    tot = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        tot += lse - row[y]
    return tot / len(labels)


def cifar_decode(raw: bytes, label_bytes=1):
    """Byte-at-a-time decoder for the CIFAR record layout."""
    rec = label_bytes + 3072
    labels, images = [], []
    for off in range(0, len(raw), rec):
        chunk = raw[off:off + rec]
        labels.append(chunk[label_bytes - 1])
        img = [[[chunk[label_bytes + c * 1024 + y * 32 + x] for x in range(32)] for y in range(32)]
               for c in range(3)]
        images.append(img)
    return labels, np.array(images, dtype=np.uint8).reshape(-1, 3, 32, 32)


def dyadic(rng, shape, denom=64, lo=0, hi=64):
    """Random multiples of ``1/denom``: sums of a few of them are exact in floating point."""
    return rng.integers(lo, hi + 1, size=shape) / denom
