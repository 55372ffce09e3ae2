"""Command-line entry point.

Exit codes: 0 success, 1 invariant violation, 2 bad configuration, 3 data
error, 4 numeric failure. Failures print a single ``error: ...`` line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .data import Dataset, channel_stats, gen_synthetic, load_cifar10_binary, load_cifar100_binary, \
    write_binary, normalize
from .errors import ConfigError, DataFormatError, NumericError
from .model import ModelConfig, SpikeHaltNet, load_checkpoint
from .train import TrainConfig, evaluate, stats_from_meta, train_phase

log = logging.getLogger("spikehalt")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def split_config(raw: dict) -> tuple[dict, dict]:
    """Route flat JSON keys to ModelConfig / TrainConfig; nested ``model``/``train`` also work."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    model_kw = dict(raw.pop("model", {}) or {})
    train_kw = dict(raw.pop("train", {}) or {})
    mf = {f.name for f in dataclasses.fields(ModelConfig)}
    tf = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, val in raw.items():
        if key not in mf and key not in tf:
            raise ConfigError(f"unknown config key {key!r}")
        if key in mf:
            model_kw[key] = val
        if key in tf:
            train_kw[key] = val
    return model_kw, train_kw


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def load_data(spec: str, fmt: str = "cifar10") -> Dataset:
    """``synthetic:N[:SEED]`` or a path to a binary record file."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        try:
            n = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (IndexError, ValueError) as exc:
            raise DataFormatError(f"bad synthetic data spec {spec!r}") from exc
        return gen_synthetic(n, seed)
    try:
        return load_cifar100_binary(spec) if fmt == "cifar100" else load_cifar10_binary(spec)
    except FileNotFoundError as exc:
        raise DataFormatError(f"data file not found: {spec}") from exc


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataFormatError(f"checkpoint not found: {path}") from exc
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint/config mismatch: {exc}") from exc


def _stats(meta, data):
    stats = stats_from_meta(meta)
    if stats is None:
        log.warning("checkpoint has no normalisation constants; using the data's own")
        stats = channel_stats(data)
    return stats


def _check_classes(model: SpikeHaltNet, data: Dataset):
    if len(data) and data.labels.max() >= model.cfg.num_classes:
        raise ConfigError(f"data has label {data.labels.max()} but the model has "
                          f"{model.cfg.num_classes} classes")


def _write(out: Path, name: str, text: str | bytes) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    if isinstance(text, bytes):
        path.write_bytes(text)
    else:
        path.write_text(text)
    return path


def _comment(model_cfg: ModelConfig, seed: int, extra: str = "") -> str:
    return f"config={model_cfg.digest()} seed={seed}" + (f" {extra}" if extra else "")


# -- commands --------------------------------------------------------------------
def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out)
    for name, n, seed in (("train.bin", args.train, args.seed), ("test.bin", args.test, args.seed + 1)):
        if n:
            ds = gen_synthetic(n, seed)
            out.mkdir(parents=True, exist_ok=True)
            write_binary(ds, out / name)
            print(f"wrote {n} records to {out / name}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    model_kw, train_kw = split_config(cfg)
    train_kw.setdefault("seed", args.seed)
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    if args.phase is not None:
        train_kw["phase"] = args.phase
    tcfg = TrainConfig(**train_kw)
    data = load_data(args.data, args.format)
    stats = None
    if args.init:
        model, meta, _ = _checkpoint(args.init)
        stats = stats_from_meta(meta)
    else:
        if tcfg.phase == "halting_finetune":
            raise ConfigError("halting_finetune needs --init <pretrained checkpoint>")
        model_kw.setdefault("seed", args.seed)
        model = SpikeHaltNet(ModelConfig(**model_kw))
    _check_classes(model, data)
    res = train_phase(model, data, tcfg, out_dir=args.out, normalize_with=stats, resume=args.resume)
    print(json.dumps({"checkpoint": str(res.checkpoint), "epochs": res.epochs_run,
                      "last": res.metrics[-1] if res.metrics else None}))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    model, meta, _ = _checkpoint(args.checkpoint)
    data = load_data(args.data, args.format)
    _check_classes(model, data)
    halting = None if args.halting is None else args.halting == "on"
    m = evaluate(model, data, eps=args.eps, normalize_with=_stats(meta, data), halting=halting)
    text = json.dumps(m, sort_keys=True)
    _write(Path(args.out), "eval.json", text + "\n")
    print(text)
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    model, meta, _ = _checkpoint(args.checkpoint)
    data = load_data(args.data, args.format)
    _check_classes(model, data)
    grid = [float(v) for v in args.grid.split(",")]
    rows = analysis.epsilon_sweep(model, data, grid, _stats(meta, data))
    text = analysis.to_csv(rows, ["eps", "acc", "avg_tokens", "energy"],
                           _comment(model.cfg, args.seed))
    print(_write(Path(args.out), "sweep.csv", text))
    return EXIT_OK


def cmd_similarity(args, cfg) -> int:
    model, meta, _ = _checkpoint(args.checkpoint)
    data = load_data(args.data, args.format)
    if args.limit:
        data = data.subset(np.arange(min(args.limit, len(data))))
    rows = analysis.dataset_similarity(model, data, _stats(meta, data))
    text = analysis.to_csv(rows, ["axis", "index", "mean_cos", "std"],
                           _comment(model.cfg, args.seed, f"embed={model.cfg.embed_mode}"))
    print(_write(Path(args.out), "similarity.csv", text))
    return EXIT_OK


def cmd_haltmap(args, cfg) -> int:
    model, meta, _ = _checkpoint(args.checkpoint)
    data = load_data(args.data, args.format)
    if not 0 <= args.index < len(data):
        raise DataFormatError(f"image index {args.index} outside [0, {len(data)})")
    x = normalize(data.subset([args.index]).pixels, _stats(meta, data))
    halting = None if args.halting is None else args.halting == "on"
    hm = analysis.halting_map(model, x, eps=args.eps, halting=halting)
    out = Path(args.out)
    comment = _comment(model.cfg, args.seed, f"image={args.index}")
    _write(out, "haltmap.csv", analysis.to_csv(
        [(k, int(c)) for k, c in enumerate(hm.counts)], ["token", "processed"], comment))
    n_t, n_l = hm.halted.shape
    _write(out, "halted_positions.csv", analysis.to_csv(
        [(t + 1, l + 1, int(hm.halted[t, l])) for t in range(n_t) for l in range(n_l)],
        ["t", "l", "halted"], comment))
    print(_write(out, "haltmap.pgm", analysis.pgm_bytes(hm.pgm_pixels())))
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    model, meta, _ = _checkpoint(args.checkpoint)
    data = load_data(args.data, args.format)
    _check_classes(model, data)
    modes = analysis.MODES if args.mode == "both" else (args.mode,)
    rows = analysis.accumulation_ablation(model, data, args.eps, _stats(meta, data), modes)
    text = analysis.to_csv(rows, ["mode", "avg_tokens", "acc"],
                           _comment(model.cfg, args.seed, "modes=" + ",".join(modes)))
    print(_write(Path(args.out), "ablation.csv", text))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikehalt", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file with model and training settings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, checkpoint=True):
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True, help="binary record file or synthetic:N[:SEED]")
        sp.add_argument("--format", choices=("cifar10", "cifar100"), default="cifar10")

    sp = sub.add_parser("gen-data", help="write the synthetic task as binary records")
    sp.add_argument("--train", type=int, default=2000)
    sp.add_argument("--test", type=int, default=500)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="run one training phase")
    data_args(sp, checkpoint=False)
    sp.add_argument("--phase", choices=("pretrain", "halting_finetune"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--init", help="checkpoint to start from (required for halting_finetune)")
    sp.add_argument("--resume", help="epoch checkpoint of an interrupted run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy, token usage and energy")
    data_args(sp)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--halting", choices=("on", "off"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="evaluate over an eps grid")
    data_args(sp)
    sp.add_argument("--grid", default="0,0.01,0.05,0.1,0.2,0.5,1.0")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("similarity", help="cosine similarity of block inputs")
    data_args(sp)
    sp.add_argument("--limit", type=int, default=0, help="use only the first N samples")
    sp.set_defaults(func=cmd_similarity)

    sp = sub.add_parser("haltmap", help="per-token processed counts for one image")
    data_args(sp)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--halting", choices=("on", "off"))
    sp.set_defaults(func=cmd_haltmap)

    sp = sub.add_parser("ablate", help="block-only vs two-dimensional accumulation")
    data_args(sp)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--mode", choices=("both",) + tuple(analysis.MODES), default="both")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, exc
    except DataFormatError as exc:
        code, msg = EXIT_DATA, exc
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, exc
    except analysis.InvariantError as exc:
        code, msg = EXIT_INVARIANT, exc
    except (TypeError, ValueError) as exc:
        code, msg = EXIT_CONFIG, exc
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
