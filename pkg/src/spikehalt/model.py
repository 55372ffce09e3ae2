"""Spiking transformer with token halting over blocks and timesteps."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .block import RESIDUAL_MODES, Block
from .embed import MODES as EMBED_MODES
from .embed import PatchEmbed, PatchEmbedConfig
from .energy import OpCount, estimate_energy, linear_counts
from .errors import ConfigError, DataFormatError
from .halting import MODES as ACC_MODES
from .halting import HaltingTensors, HaltState, HaltTrace, halting_score, probability_tensors, scan
from .loss import NORMALIZERS, mean_field_state
from .neuron import LifParams
from .nn import Linear, Module
from .tensor import Tensor

MAGIC = b"STAS1"
HEADS = ("auto", "mean_field", "average")


@dataclass
class ModelConfig:
    timesteps: int = 4
    blocks: int = 4
    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    embed_dim: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    conv_stages: list | None = None       # None -> [(D/4, 3, 1, pool), (D, 3, 1, pool)]
    num_classes: int = 3
    alpha: float = -5.0
    beta: float = 0.0
    eps_train: float = 0.01
    eps_infer: float = 0.01
    delta_p: float = 1e-3
    embed_mode: str = "i_sps"
    residual: str = "spikformer"
    attn_scale: float = 0.125
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_scale: float = 4.0
    halting: bool = True
    accumulation: str = "two_dimensional"
    normalizer: str = "TK"
    clamp_remainder: bool = True
    ponder_pre_halt: str = "zero"
    head: str = "auto"
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.conv_stages is None:
            self.conv_stages = [(max(self.embed_dim // 4, 1), 3, 1, True), (self.embed_dim, 3, 1, True)]
        self.conv_stages = [tuple(s) for s in self.conv_stages]
        if self.timesteps < 1:
            raise ConfigError("timesteps must be >= 1")
        if self.blocks < 2:
            raise ConfigError("halting needs at least two blocks")
        if self.eps_infer < 0 or self.eps_train < 0:
            raise ConfigError("eps must be >= 0")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        for name, val, allowed in (("embed_mode", self.embed_mode, EMBED_MODES),
                                   ("residual", self.residual, RESIDUAL_MODES),
                                   ("accumulation", self.accumulation, ACC_MODES),
                                   ("normalizer", self.normalizer, NORMALIZERS),
                                   ("head", self.head, HEADS),
                                   ("ponder_pre_halt", self.ponder_pre_halt, ("zero", "full"))):
            if val not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {val!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        LifParams(self.tau, self.v_threshold, self.v_reset, self.surrogate_scale)
        self.embed_config()  # validates the conv stack

    def embed_config(self) -> PatchEmbedConfig:
        return PatchEmbedConfig(self.in_channels, self.image_size, self.embed_dim,
                                self.conv_stages, self.embed_mode)

    @property
    def num_tokens(self) -> int:
        return self.embed_config().num_tokens

    def lif_params(self) -> LifParams:
        return LifParams(self.tau, self.v_threshold, self.v_reset, self.surrogate_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["conv_stages"] = [list(s) for s in self.conv_stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class ForwardResult:
    logits: Tensor
    trace: HaltTrace
    halt: HaltingTensors | None
    outputs: list[Tensor]
    final_outputs: list[Tensor]
    ops: OpCount | None = None
    block_inputs: list[list[Tensor]] | None = None   # [t][l] inputs, when requested
    extra: dict = field(default_factory=dict)

    @property
    def avg_tokens(self) -> float:
        return self.trace.avg_tokens()

    @property
    def sop_count(self) -> int:
        return self.ops.total_sops if self.ops is not None else 0

    def energy(self, e_mac: float | None = None, e_ac: float | None = None) -> float:
        if self.ops is None:
            raise ValueError("forward was run without op counting")
        kw = {}
        if e_mac is not None:
            kw["e_mac"] = e_mac
        if e_ac is not None:
            kw["e_ac"] = e_ac
        return estimate_energy(self.ops, **kw)


BlockHook = Callable[[int, int, Tensor, np.ndarray], Tensor]


class SpikeHaltNet(Module):
    """Patch embedding, ``L`` encoder blocks unrolled over ``T`` timesteps, linear head.

    Halting decisions are taken after every block in (timestep, block) scan order;
    masked tokens are zeroed for the rest of the scan.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dt = T.get_default_dtype()
        rng = np.random.default_rng(cfg.seed)
        lif = cfg.lif_params()
        self.embed = PatchEmbed(cfg.embed_config(), rng, lif)
        self.blocks = [Block(cfg.embed_dim, cfg.heads, rng, cfg.mlp_ratio, cfg.attn_scale, lif,
                             cfg.residual, name=f"block.{i}") for i in range(cfg.blocks)]
        self.head = Linear(cfg.embed_dim, cfg.num_classes, rng)
        self.eps = cfg.eps_infer
        self.dtype = dt

    # -- knobs ---------------------------------------------------------------
    def set_epsilon(self, eps: float) -> None:
        if eps < 0:
            raise ValueError("eps must be >= 0")
        self.eps = float(eps)

    def set_relaxed(self, relaxed: bool = True) -> None:
        for node in self.all_lif_nodes():
            node.relaxed = relaxed

    def all_lif_nodes(self):
        return list(self.lif_nodes())

    def reset_states(self) -> None:
        for node in self.lif_nodes():
            node.reset()

    @property
    def num_tokens(self) -> int:
        return self.cfg.num_tokens

    # -- forward -------------------------------------------------------------
    def forward(self, x, *, halting: bool | None = None, eps: float | None = None,
                accumulation: str | None = None, head: str | None = None, count: bool = False,
                keep_inputs: bool = False, block_hook: BlockHook | None = None) -> ForwardResult:
        cfg = self.cfg
        halting = cfg.halting if halting is None else halting
        if eps is None:
            eps = cfg.eps_train if self.training else self.eps
        if eps < 0:
            raise ValueError("eps must be >= 0")
        accumulation = accumulation or cfg.accumulation
        head = head or cfg.head
        if head == "auto":
            head = "mean_field" if halting else "average"

        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        self.reset_states()
        counter = OpCount() if count else None
        n_t, n_l = cfg.timesteps, cfg.blocks
        tokens = self.embed.forward(x, n_t, counter)
        b, k = tokens[0].shape[:2]
        dt = tokens[0].data.dtype

        st = HaltState((b, k), n_t, n_l, eps, accumulation, dt.type) if halting else None
        h_slots, outputs, final_outputs = [], [], []
        processed = np.ones((n_t, n_l, b, k), dtype=bool)
        H_rec = np.zeros((n_t, n_l, b, k), dtype=dt)
        inputs = [] if keep_inputs else None
        for t in range(1, n_t + 1):
            z = tokens[t - 1]
            row = []
            for l in range(1, n_l + 1):
                active = st.active if halting else None
                if active is not None:
                    processed[t - 1, l - 1] = active
                if block_hook is not None:
                    z = block_hook(t, l, z, processed[t - 1, l - 1])
                if keep_inputs:
                    row.append(z)
                mask = None if active is None or active.all() else active
                z = self.blocks[l - 1](z, mask, counter)
                outputs.append(z)
                if halting:
                    h = halting_score(z, cfg.alpha, cfg.beta, mask=active)
                    h_slots.append(h)
                    st.accumulate(h.data, t, l)
                    H_rec[t - 1, l - 1] = st.last_H
            final_outputs.append(z)
            if keep_inputs:
                inputs.append(row)

        if halting:
            halt = probability_tensors(h_slots, st, cfg.clamp_remainder)
            h_grid = np.stack([h.data for h in h_slots]).reshape(n_t, n_l, b, k)
            p_grid = np.stack([p.data for p in halt.p]).reshape(n_t, n_l, b, k)
            trace = HaltTrace(h_grid, H_rec, p_grid, processed, st.halt_t, st.halt_l,
                              st.r_at_halt, st.forced, accumulation, eps)
        else:
            halt = None
            trace = scan(np.zeros((n_t, n_l, b, k), dtype=dt), eps, accumulation)

        if head == "mean_field":
            if halt is None:
                p = [Tensor(trace.p[t, l]) for t in range(n_t) for l in range(n_l)]
            else:
                p = halt.p
            state_in = mean_field_state(outputs, p, n_t, cfg.normalizer)
        else:
            acc = final_outputs[0]
            for o in final_outputs[1:]:
                acc = acc + o
            state_in = (acc * (1.0 / n_t)).mean(axis=1)
        logits = self.head(state_in)
        if counter is not None:
            f, _, _, _ = linear_counts(np.zeros((b, cfg.embed_dim), dtype=dt), cfg.num_classes, False)
            counter.add_dense("head", f)
        return ForwardResult(logits, trace, halt, outputs, final_outputs, counter, inputs,
                             {"features": state_in.data})

    __call__ = forward

    def predict(self, x, **kw) -> np.ndarray:
        with T.no_grad():
            return predict(self.forward(x, **kw).logits.data)


def predict(logits) -> np.ndarray:
    """Arg-max class per row; ties go to the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=-1)


def set_epsilon(model: SpikeHaltNet, eps: float) -> None:
    model.set_epsilon(eps)


# -- checkpoints -----------------------------------------------------------------
def save_checkpoint(path, model: SpikeHaltNet, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write ``STAS1`` magic, a length-prefixed JSON manifest, then little-endian float32 data."""
    tensors = dict(model.state_dict())
    for name, arr in (extra or {}).items():
        tensors[f"extra/{name}"] = arr
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {"format": MAGIC.decode(), "version": 1, "config": model.cfg.to_dict(),
                "tensors": entries, "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC + b"\n"):
        raise DataFormatError(f"{path}: not a checkpoint (missing {MAGIC.decode()} magic)")
    pos = len(MAGIC) + 1
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    manifest = json.loads(raw[pos:pos + n].decode("utf-8"))
    base = pos + n
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise DataFormatError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return manifest, tensors


def load_checkpoint(path) -> tuple[SpikeHaltNet, dict, dict[str, np.ndarray]]:
    """Return ``(model, meta, extra_tensors)``."""
    manifest, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    with T.default_dtype(np.float32):
        model = SpikeHaltNet(cfg)
    own = {k: v for k, v in tensors.items() if not k.startswith("extra/")}
    model.load_state_dict(own)
    extra = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return model, manifest.get("meta", {}), extra
