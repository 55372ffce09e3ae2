"""Two-phase training: task-loss pretraining with halting off, then halting fine-tuning.

Each epoch writes a checkpoint that also holds the optimizer state, so a run
resumed from it continues bit-exactly (batch order depends only on seed and
epoch).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset, channel_stats, make_batches
from .errors import ConfigError, NumericError
from .loss import cross_entropy, ponder_loss
from .model import SpikeHaltNet, predict, read_checkpoint, save_checkpoint
from .nn import Module

log = logging.getLogger(__name__)

PHASES = ("pretrain", "halting_finetune")
OPTIMIZERS = ("adamw", "sgd_momentum")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adamw"
    phase: str = "pretrain"
    log_every: int = 1
    momentum: float = 0.9
    clip_norm: float = 5.0
    schedule: str = "cosine"
    flip: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1 or self.log_every < 1:
            raise ConfigError("batch and log_every must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'")
        if self.weight_decay < 0 or self.clip_norm <= 0:
            raise ConfigError("weight_decay must be >= 0 and clip_norm > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


class Optimizer:
    """Shared plumbing: decoupled weight decay on matrices, state as flat arrays."""

    def __init__(self, params: list[tuple[str, T.Tensor]], lr: float, weight_decay: float):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        raise NotImplementedError

    def _decay(self, p: T.Tensor, lr: float) -> None:
        if self.weight_decay and p.ndim >= 2:
            p.data *= np.float32(1 - lr * self.weight_decay)


class AdamW(Optimizer):
    def __init__(self, params, lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr, weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}

    def step(self, lr: float) -> None:
        self.steps += 1
        c1 = 1 - self.b1 ** self.steps
        c2 = 1 - self.b2 ** self.steps
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            self._decay(p, lr)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        out = {"steps": np.array([self.steps], dtype=np.float32)}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state_dict(self, state):
        self.steps = int(state["steps"][0])
        for n in self.m:
            self.m[n][...] = state[f"m/{n}"]
            self.v[n][...] = state[f"v/{n}"]


class SGDMomentum(Optimizer):
    def __init__(self, params, lr=0.1, weight_decay=1e-4, momentum=0.9):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.buf = {n: np.zeros_like(p.data) for n, p in params}

    def step(self, lr: float) -> None:
        self.steps += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            b = self.buf[name]
            b *= self.momentum
            b += p.grad
            self._decay(p, lr)
            p.data -= lr * b

    def state_dict(self):
        out = {"steps": np.array([self.steps], dtype=np.float32)}
        out.update({f"buf/{n}": b for n, b in self.buf.items()})
        return out

    def load_state_dict(self, state):
        self.steps = int(state["steps"][0])
        for n in self.buf:
            self.buf[n][...] = state[f"buf/{n}"]


def make_optimizer(model: Module, cfg: TrainConfig) -> Optimizer:
    params = list(model.named_parameters())
    if cfg.optimizer == "adamw":
        return AdamW(params, cfg.lr, cfg.weight_decay)
    return SGDMomentum(params, cfg.lr, cfg.weight_decay, cfg.momentum)


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1 + math.cos(math.pi * min(step, total) / max(total, 1)))


def clip_grad_norm(params: list[T.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = T.parameters_grad_norm(params)
    if not math.isfinite(norm):
        return norm
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainResult:
    checkpoint: Path | None
    metrics: list[dict] = field(default_factory=list)
    epochs_run: int = 0


def _stats_meta(stats) -> dict:
    return {"mean": [float(v) for v in stats[0]], "std": [float(v) for v in stats[1]]}


def stats_from_meta(meta: dict):
    norm = meta.get("normalization")
    if not norm:
        return None
    return np.asarray(norm["mean"], np.float32), np.asarray(norm["std"], np.float32)


def _dump_nan(out_dir: Path | None, x, y, result, step: int) -> str:
    if out_dir is None:
        return ""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"nan_step{step}.npz"
    arrays = {"x": x, "y": y}
    if result is not None:
        tr = result.trace
        arrays.update(h=tr.h, H=tr.H, p=tr.p, processed=tr.processed,
                      logits=result.logits.data)
    np.savez(path, **arrays)
    return str(path)


def objective(model: SpikeHaltNet, x, y, halting: bool, **forward_kw):
    """Training loss for one batch: ``(overall, task, ponder or None, forward result)``.

    With halting on the overall loss is ``task + delta_p * ponder``.
    """
    mc = model.cfg
    out = model.forward(x, halting=halting, **forward_kw)
    task = cross_entropy(out.logits, y)
    if not halting:
        return task, task, None, out
    pond = ponder_loss(out.halt, mc.timesteps, mc.blocks, model.num_tokens, mc.ponder_pre_halt)
    return task + pond * mc.delta_p, task, pond, out


def train_phase(model: SpikeHaltNet, data: Dataset, cfg: TrainConfig, out_dir=None,
                normalize_with=None, resume=None, metrics_path=None,
                on_epoch: Callable[[int, SpikeHaltNet], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of one phase and checkpoint after each.

    ``pretrain`` optimises cross-entropy with halting off. ``halting_finetune``
    optimises cross-entropy plus ``delta_p`` times the ponder loss. Metrics go to
    ``metrics_path`` (JSON lines, default ``out_dir/metrics.jsonl``).
    ``normalize_with`` defaults to the channel statistics of ``data``; they are
    stored in every checkpoint. ``resume`` is a checkpoint from a previous epoch
    of this same run.
    """
    halting = cfg.phase == "halting_finetune"
    out_dir = Path(out_dir) if out_dir is not None else None
    stats = normalize_with if normalize_with is not None else channel_stats(data)
    opt = make_optimizer(model, cfg)
    start_epoch = 0
    if resume is not None:
        manifest, tensors = read_checkpoint(resume)
        meta = manifest.get("meta", {})
        if meta.get("phase") != cfg.phase:
            raise ConfigError(f"cannot resume phase {cfg.phase} from a {meta.get('phase')} checkpoint")
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("extra/")})
        opt.load_state_dict({k[len("extra/optim/"):]: v for k, v in tensors.items()
                             if k.startswith("extra/optim/")})
        start_epoch = int(meta["epoch"]) + 1
        stats = stats_from_meta(meta) or stats

    steps_per_epoch = math.ceil(len(data) / cfg.batch)
    total = steps_per_epoch * cfg.epochs
    if metrics_path is None and out_dir is not None:
        metrics_path = out_dir / "metrics.jsonl"
    log_fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(metrics_path, "a" if resume is not None else "w")
    params = model.parameters()
    result = TrainResult(None)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            model.train()
            for x, y in make_batches(data, cfg.batch, cfg.seed, stats, epoch=epoch, flip=cfg.flip):
                step = opt.steps
                lr = cosine_lr(cfg.lr, step, total) if cfg.schedule == "cosine" else cfg.lr
                model.zero_grad()
                out = None
                try:
                    loss, task, pond, out = objective(model, x, y, halting, count=True)
                except FloatingPointError as exc:  # pragma: no cover - numpy errstate
                    raise NumericError(str(exc)) from exc
                if not np.isfinite(loss.item()):
                    T.current_graph().clear()
                    dump = _dump_nan(out_dir, x, y, out, step)
                    raise NumericError(f"non-finite loss at step {step}" + (f"; dump {dump}" if dump else ""))
                loss.backward()
                gnorm = clip_grad_norm(params, cfg.clip_norm)
                if not math.isfinite(gnorm):
                    dump = _dump_nan(out_dir, x, y, out, step)
                    raise NumericError(f"non-finite gradient at step {step}" + (f"; dump {dump}" if dump else ""))
                opt.step(lr)
                if step % cfg.log_every == 0:
                    rec = {"phase": cfg.phase, "step": step, "task_loss": task.item(),
                           "ponder_loss": pond.item() if pond is not None else 0.0,
                           "overall": loss.item(),
                           "acc": float(np.mean(predict(out.logits) == y)),
                           "avg_tokens": out.avg_tokens, "sops": out.sop_count}
                    result.metrics.append(rec)
                    if log_fh is not None:
                        log_fh.write(json.dumps(rec) + "\n")
            result.epochs_run += 1
            if out_dir is not None:
                meta = {"phase": cfg.phase, "epoch": epoch, "step": opt.steps,
                        "train": asdict(cfg), "normalization": _stats_meta(stats)}
                extra = {f"optim/{k}": v for k, v in opt.state_dict().items()}
                path = out_dir / f"{cfg.phase}_epoch{epoch:03d}.stas"
                save_checkpoint(path, model, extra, meta)
                save_checkpoint(out_dir / f"{cfg.phase}_last.stas", model, extra, meta)
                result.checkpoint = out_dir / f"{cfg.phase}_last.stas"
            if on_epoch is not None:
                on_epoch(epoch, model)
            log.info("%s epoch %d done (step %d)", cfg.phase, epoch, opt.steps)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return result


def evaluate(model: SpikeHaltNet, data: Dataset, eps: float | None = None, normalize_with=None,
             batch: int = 100, halting: bool | None = None, accumulation: str | None = None) -> dict:
    """Accuracy, processed-slot fraction and mean energy per sample (joules) over ``data``."""
    if not len(data):
        raise ValueError("empty dataset")
    model.eval()
    correct, tokens, energy, sops, n = 0, 0.0, 0.0, 0, 0
    with T.no_grad():
        for x, y in make_batches(data, batch, 0, normalize_with, shuffle=False):
            out = model.forward(x, eps=eps, halting=halting, accumulation=accumulation, count=True)
            correct += int(np.sum(predict(out.logits) == y))
            tokens += out.avg_tokens * len(y)
            energy += out.energy()
            sops += out.sop_count
            n += len(y)
    return {"accuracy": correct / n, "avg_tokens": tokens / n, "energy": energy / n,
            "sops": sops / n}
