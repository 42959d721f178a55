"""Command-line interface.

Every command writes into ``--out`` only::

    <out>/config.json     run manifest (enough to replay the run)
    <out>/checkpoints/    model/ and/or adapter/ containers
    <out>/reports/        CSV/JSON reports
    <out>/log.txt         one line per epoch: epoch, mean loss, wall time

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import jsonschema
import torch

from . import __version__
from .adapters import AdapterConfig, Method, adapted_layers, attach_adapters, count_trainable, merge_adapters, param_count
from .backbones import STRATEGIES, NetworkSpec, build_network
from .checkpoint import AdapterCheckpoint, Checkpoint, CheckpointError
from .data import AUGMENTATIONS, DataError, SynthSpec, generate_synthetic, load_dataset, write_dataset
from .losses import VOLUME_BINS, EvalReport, bin_label
from .training import (
    CellResult,
    DivergenceError,
    SweepConfig,
    TrainConfig,
    evaluate,
    finetune_adapter,
    finetune_freeze,
    fold_split,
    pool_cells,
    pretrain,
    rank_series,
    run_cell,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "SEGADAPT_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def parse_mode(mode: str) -> Tuple[str, str, Optional[int]]:
    """``freeze:<strategy>`` or ``adapter:<method>:<rank>``."""
    parts = mode.split(":")
    if parts[0] == "freeze" and len(parts) == 2:
        strategy = parts[1].lower()
        if strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {parts[1]!r}; choose from {sorted(STRATEGIES)}")
        return "freeze", strategy, None
    if parts[0] == "adapter" and len(parts) == 3:
        try:
            method = Method.parse(parts[1]).value
        except ValueError as e:
            raise UsageError(str(e)) from None
        try:
            rank = int(parts[2])
        except ValueError:
            raise UsageError(f"rank must be an integer, got {parts[2]!r}") from None
        if rank < 1:
            raise UsageError(f"rank must be positive, got {rank}")
        return "adapter", method, rank
    raise UsageError(f"mode must be freeze:<strategy> or adapter:<method>:<rank>, got {mode!r}")


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _resolve_ckpt(path: Path, sub: str) -> Path:
    """Accept a container directory or a run directory holding ``checkpoints/<sub>``."""
    if (path / "manifest.json").exists():
        return path
    cand = path / "checkpoints" / sub
    if (cand / "manifest.json").exists():
        return cand
    raise CheckpointError(f"no checkpoint found at {path}")


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _train_config(args, phase: str) -> TrainConfig:
    kw = dict(
        learning_rate=args.lr,
        batch_size=args.batch,
        seed=args.seed,
        optimizer=args.optimizer,
        n_views=args.views,
        augment=tuple(a for a in args.augment.split(",") if a) if args.augment else (),
    )
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.max_steps is not None:
        kw["max_steps"] = args.max_steps
    try:
        return TrainConfig.for_phase(phase, **kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


class EpochLog:
    def __init__(self, path: Path) -> None:
        self.fh = open(path, "w")

    def __call__(self, epoch: int, loss: float, wall: float) -> None:
        self.fh.write(f"{epoch}\t{loss:.6f}\t{wall:.3f}\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> dict:
    try:
        spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text()))
        vols = generate_synthetic(spec)
    except (ValueError, TypeError, json.JSONDecodeError) as e:
        raise UsageError(f"invalid synth spec: {e}") from None
    write_dataset(vols, args.out, extra={"synth_spec": spec.to_dict()})
    return {"outputs": {"dataset": str(args.out)}, "patients": [v.patient_id for v in vols]}


def cmd_pretrain(args) -> dict:
    out = Path(args.out)
    vols = load_dataset(args.data)
    cfg = _train_config(args, "pretrain")
    spec = NetworkSpec(architecture=args.model, base_channels=args.base_channels)
    net = build_network(spec, seed=args.seed)
    logger = EpochLog(out / "log.txt")
    try:
        ck = pretrain(net, vols, cfg, on_epoch=logger)
    finally:
        logger.close()
    ck.save(out / "checkpoints" / "model")
    return {"config": cfg.to_dict(), "outputs": {"checkpoint": str(out / "checkpoints" / "model")}}


def cmd_finetune(args) -> dict:
    out = Path(args.out)
    kind, what, rank = parse_mode(args.mode)
    base = Checkpoint.load(_resolve_ckpt(Path(args.ckpt), "model"))
    if base.spec.architecture != args.model:
        raise CheckpointError(f"checkpoint holds a {base.spec.architecture!r} network, not {args.model!r}")
    vols = load_dataset(args.data)
    cfg = _train_config(args, "finetune")
    logger = EpochLog(out / "log.txt")
    try:
        if kind == "freeze":
            ck = finetune_freeze(base, vols, what, cfg, on_epoch=logger)
            dest = out / "checkpoints" / "model"
        else:
            ck = finetune_adapter(base, vols, what, rank, cfg, on_epoch=logger)
            dest = out / "checkpoints" / "adapter"
    finally:
        logger.close()
    ck.save(dest)
    return {"config": cfg.to_dict(), "outputs": {"checkpoint": str(dest)}}


def _load_model(ckpt: Optional[str], adapter: Optional[str]):
    if adapter and not ckpt:
        raise UsageError("--adapter needs the base checkpoint it was trained on (--ckpt)")
    if not ckpt:
        raise UsageError("--ckpt is required")
    base = Checkpoint.load(_resolve_ckpt(Path(ckpt), "model"))
    if adapter:
        ack = AdapterCheckpoint.load(_resolve_ckpt(Path(adapter), "adapter"))
        return ack.attach(base)
    return base.build()


def cmd_eval(args) -> dict:
    out = Path(args.out)
    net = _load_model(args.ckpt, args.adapter)
    vols = load_dataset(args.data)
    if any(v.mask.sum() == 0 for v in vols):
        missing = [v.patient_id for v in vols if v.mask.sum() == 0]
        raise DataError(f"patients without annotation: {missing}")
    report = evaluate(net, vols, contrast_seed=None if args.no_contrast else args.seed)
    report.write(out / "reports")
    return {"outputs": {"reports": str(out / "reports")}, "summary": report.bins}


def cmd_params(args) -> dict:
    kind, method, rank = parse_mode(args.mode)
    if kind != "adapter":
        raise UsageError("params needs --mode adapter:<method>:<rank>")
    if args.ckpt:
        spec = Checkpoint.load(_resolve_ckpt(Path(args.ckpt), "model")).spec
    else:
        spec = NetworkSpec(architecture=args.model, base_channels=args.base_channels)
    net = build_network(spec)
    cfg = AdapterConfig(method, rank)
    attach_adapters(net, cfg)
    rows = []
    for name, layer in adapted_layers(net):
        c_out, c_in, k_h, k_w = layer.adapter.weight_shape
        audited = count_trainable(layer)
        closed = param_count(method, c_in, c_out, (k_h, k_w), rank)
        rows.append({"layer": name, "c_in": c_in, "c_out": c_out, "k": k_h, "trainable": audited, "closed_form": closed})
    total = count_trainable(net)
    closed_total = sum(r["closed_form"] for r in rows)
    if args.json:
        print(json.dumps({"method": method, "rank": rank, "layers": rows, "total": total, "closed_form_total": closed_total}, indent=2))
    else:
        print(f"{'layer':<28} {'c_in':>5} {'c_out':>5} {'k':>2} {'trainable':>10} {'closed':>10}")
        for r in rows:
            print(f"{r['layer']:<28} {r['c_in']:>5} {r['c_out']:>5} {r['k']:>2} {r['trainable']:>10} {r['closed_form']:>10}")
        print(f"{'total':<28} {'':>5} {'':>5} {'':>2} {total:>10} {closed_total:>10}")
    if total != closed_total or any(r["trainable"] != r["closed_form"] for r in rows):
        raise ArithmeticError("audited trainable counts disagree with the closed forms")
    return {"summary": {"total": total, "layers": len(rows)}}


def cmd_merge(args) -> dict:
    out = Path(args.out)
    base = Checkpoint.load(_resolve_ckpt(Path(args.ckpt), "model"))
    ack = AdapterCheckpoint.load(_resolve_ckpt(Path(args.adapter), "adapter"))
    net = merge_adapters(ack.attach(base))
    merged = Checkpoint.from_network(net, merged_from=ack.config.to_dict())
    dest = out / "checkpoints" / "model"
    merged.save(dest)
    return {"outputs": {"checkpoint": str(dest)}}


PROTOCOL_SCHEMA = {
    "type": "object",
    "required": ["data", "base_ckpt"],
    "additionalProperties": False,
    "properties": {
        "data": {"type": "string"},
        "base_ckpt": {"type": "string"},
        "methods": {"type": "array", "items": {"type": "string"}},
        "ranks": {"type": "array", "items": {"type": "integer", "enum": [2, 4, 8, 16, 32, 64, 96, 128]}},
        "strategies": {"type": "array", "items": {"type": "string", "enum": sorted(STRATEGIES)}},
        "folds": {"type": "integer", "minimum": 2},
        "split_seed": {"type": "integer"},
        "epochs": {"type": "integer", "minimum": 0},
        "max_steps": {"type": ["integer", "null"], "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "views": {"type": "integer", "minimum": 1},
        "augment": {"type": "array", "items": {"type": "string", "enum": list(AUGMENTATIONS)}},
    },
}


def _load_protocol(path: str) -> dict:
    try:
        proto = json.loads(Path(path).read_text())
        jsonschema.validate(proto, PROTOCOL_SCHEMA)
        SweepConfig(
            methods=proto.get("methods", []),
            ranks=proto.get("ranks", []),
            folds=proto.get("folds", 3),
            strategies=proto.get("strategies", []),
        )
    except (json.JSONDecodeError, jsonschema.ValidationError, ValueError) as e:
        msg = e.message if isinstance(e, jsonschema.ValidationError) else str(e)
        raise UsageError(f"invalid protocol: {msg}") from None
    return proto


def _sweep_parts(proto: dict):
    sweep = SweepConfig(
        methods=proto.get("methods", []),
        ranks=proto.get("ranks", []),
        folds=proto.get("folds", 3),
        strategies=proto.get("strategies", []),
    )
    cfg = TrainConfig.for_phase(
        "finetune",
        epochs=proto.get("epochs", 20),
        learning_rate=proto.get("lr", 1e-3),
        batch_size=proto.get("batch", 2),
        seed=proto.get("seed", 0),
        n_views=proto.get("views", 3),
        augment=tuple(proto.get("augment", AUGMENTATIONS)),
        max_steps=proto.get("max_steps"),
    )
    return sweep, cfg


def _sweep_worker(proto: dict, mode: str, fold: int, cell_path: str, threads: int) -> str:
    _configure_torch(threads)
    sweep, cfg = _sweep_parts(proto)
    vols = load_dataset(proto["data"])
    base = Checkpoint.load(_resolve_ckpt(Path(proto["base_ckpt"]), "model"))
    split = fold_split([v.patient_id for v in vols], sweep.folds, proto.get("split_seed", 0))
    cell = run_cell(mode, fold, vols, split, base, cfg)
    _write_json_atomic(Path(cell_path), cell.to_dict())
    return cell_path


def _table(reports: Dict[str, EvalReport], modes: List[str], labels: List[str]) -> str:
    bins = [bin_label(lo, hi) for lo, hi in VOLUME_BINS] + ["All"]
    lines = [",".join(["model"] + [f'"{b}"' for b in bins])]
    if modes:
        first = reports[modes[0]]
        lines.append(",".join(["Number of Patients"] + [str(first.bins[b]["count"]) for b in bins]))
    for mode, label in zip(modes, labels):
        cells = []
        for b in bins:
            agg = reports[mode].bins[b]
            cells.append("" if agg["count"] == 0 else f'"{agg["mean_dice"]:.3f} ({agg["std_dice"]:.2f})"')
        lines.append(",".join([label] + cells))
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> dict:
    out = Path(args.out)
    proto = _load_protocol(args.protocol)
    sweep, cfg = _sweep_parts(proto)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    pending = []
    for mode, fold in sweep.cells():
        path = cells_dir / f"{mode.replace(':', '_')}_fold{fold}.json"
        if not path.exists():
            pending.append((mode, fold, str(path)))
    threads = torch.get_num_threads()
    if args.jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_worker, proto, m, f, p, threads) for m, f, p in pending]
            for fut in futures:
                fut.result()
    else:
        for m, f, p in pending:
            _sweep_worker(proto, m, f, p, threads)

    cells = []
    for mode, fold in sweep.cells():
        path = cells_dir / f"{mode.replace(':', '_')}_fold{fold}.json"
        cells.append(CellResult.from_dict(json.loads(path.read_text())))
    reports = pool_cells(cells)
    rep_dir = out / "reports"
    rep_dir.mkdir(parents=True, exist_ok=True)
    for mode, rep in reports.items():
        rep.write(rep_dir, stem=mode.replace(":", "_"))
    series = rank_series(reports)
    with open(rep_dir / "rank_dice.csv", "w") as fh:
        fh.write("method,rank,alpha,mean_dice,std_dice,count\n")
        for r in series:
            fh.write(f"{r['method']},{r['rank']},{r['alpha']:g},{r['mean_dice']!r},{r['std_dice']!r},{r['count']}\n")

    freeze_modes = [f"freeze:{s}" for s in sweep.strategies]
    if freeze_modes:
        labels = [s.capitalize() for s in sweep.strategies]
        (rep_dir / "table_freeze.csv").write_text(_table(reports, freeze_modes, labels))
    best = {}
    for r in series:
        if r["method"] not in best or r["mean_dice"] > best[r["method"]]["mean_dice"]:
            best[r["method"]] = r
    if best:
        modes = [f"adapter:{m}:{r['rank']}" for m, r in best.items()]
        labels = [f"{Method.parse(m).label}{r['rank']}" for m, r in best.items()]
        (rep_dir / "table_adapter.csv").write_text(_table(reports, modes, labels))
    summary = {mode: rep.all for mode, rep in sorted(reports.items())}
    _write_json_atomic(rep_dir / "summary.json", summary)
    return {"config": cfg.to_dict(), "protocol": proto, "outputs": {"reports": str(rep_dir)}, "cells": len(cells)}


# --------------------------------------------------------------------------
# parser / dispatch


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None, help="default 60 (pretrain) / 20 (finetune)")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--views", type=int, default=3, help="contrast views per image, reference included")
    p.add_argument("--augment", default=",".join(AUGMENTATIONS), help="comma list; empty string disables")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segadapt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help=f"torch threads (default ${THREADS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic cohort")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("pretrain", help="train a network from scratch")
    p.add_argument("--model", choices=["multiview", "unet"], default="multiview")
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("finetune", help="freeze-strategy or adapter fine-tuning")
    p.add_argument("--model", choices=["multiview", "unet"], default="multiview")
    p.add_argument("--mode", required=True, help="freeze:<strategy> | adapter:<method>:<rank>")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="Dice and volume reports")
    p.add_argument("--ckpt")
    p.add_argument("--adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed of the test-time contrast adjustment")
    p.add_argument("--no-contrast", action="store_true")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("sweep", help="cross-validated rank/strategy sweep")
    p.add_argument("--protocol", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("params", help="audit adapter parameter counts")
    p.add_argument("--model", choices=["multiview", "unet"], default="multiview")
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--ckpt")
    p.add_argument("--mode", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("merge", help="fold an adapter into its base checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("replay", help="re-execute a run from its config.json")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "params": cmd_params,
    "merge": cmd_merge,
}
# commands that take --out but manage its contents themselves
_RESUMABLE = {"sweep"}


def _configure_torch(threads: int) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def _thread_count(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get(THREADS_ENV, "1"))


def _run(args) -> int:
    if args.command == "replay":
        manifest = json.loads(Path(args.manifest).read_text())
        recorded = dict(manifest["args"])
        recorded["out"] = args.out
        recorded["force"] = args.force
        recorded["threads"] = manifest.get("threads")
        args = argparse.Namespace(**recorded)

    threads = _thread_count(args)
    _configure_torch(threads)
    cmd = COMMANDS[args.command]
    out = getattr(args, "out", None)
    if out is not None:
        out_path = Path(out)
        if args.command in _RESUMABLE:
            _check_sweep_out(out_path, args)
        else:
            _prepare_out(out_path, getattr(args, "force", False))

    t0 = time.perf_counter()
    result = cmd(args)
    wall = time.perf_counter() - t0
    if out is not None:
        recorded = {k: v for k, v in vars(args).items() if k not in ("threads",)}
        manifest = {
            "command": args.command,
            "args": recorded,
            "seed": getattr(args, "seed", None),
            "threads": threads,
            "version": __version__,
            "torch_version": torch.__version__,
            "wall_time_s": wall,
        }
        manifest.update(result)
        _write_json_atomic(Path(out) / "config.json", manifest)
    return EXIT_OK


def _check_sweep_out(out: Path, args) -> None:
    proto = json.loads(Path(args.protocol).read_text()) if Path(args.protocol).exists() else None
    marker = out / "protocol.json"
    if out.exists() and any(out.iterdir()):
        if not marker.exists() or json.loads(marker.read_text()) != proto:
            raise UsageError(f"{out} holds a different run; choose another --out")
    out.mkdir(parents=True, exist_ok=True)
    if proto is not None:
        _write_json_atomic(marker, proto)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except UsageError as e:
        print(f"segadapt: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"segadapt: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, ArithmeticError) as e:
        print(f"segadapt: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
